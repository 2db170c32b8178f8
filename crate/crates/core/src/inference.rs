//! Prediction: search over the `k` most probable lengths, decoding each
//! position independently (or under a grammar, or greedily left to right
//! for the autoregressive decoder).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grammar::{viterbi_cyk, CompiledGrammar};
use crate::model::{DecoderVariant, Model, Prepared};
use crate::params::Graph;
use crate::tensor::Array;

/// Default `k` without a grammar.
pub const DEFAULT_TOP_K: usize = 1;
/// Default `k` with grammar-constrained decoding.
pub const DEFAULT_TOP_K_GRAMMAR: usize = 5;

#[derive(Clone, Debug)]
pub struct DecodeResult {
    pub tokens: Vec<usize>,
    pub length: usize,
    /// `log P(l | x) + Σ_i log P(y_i | ·)`.
    pub log_score: f64,
    /// Per-position distributions for the chosen length.
    pub distributions: Option<Array>,
}

/// One line of prediction output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionRecord {
    pub source: Vec<String>,
    pub prediction: Vec<String>,
    pub length: usize,
    pub log_score: f64,
}

/// The `k` most probable lengths in `1..=max_len` with nonzero probability,
/// most probable first; ties favour the shorter length.
pub fn top_k_lengths(dist: &[f64], k: usize, max_len: usize) -> Vec<usize> {
    let mut cands: Vec<usize> = (1..=max_len.min(dist.len().saturating_sub(1)))
        .filter(|&l| dist[l] > 0.0)
        .collect();
    cands.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
    cands.truncate(k);
    cands
}

/// Index of the largest entry; ties favour the smaller index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn candidate_lengths(model: &Model, g: &Graph, prep: &Prepared, k: usize) -> Result<(Vec<usize>, Vec<f64>)> {
    if k == 0 {
        return Err(Error::Config("top-k must be >= 1".into()));
    }
    let dist = g.tape.value(prep.length_dist).data().to_vec();
    let lens = top_k_lengths(&dist, k, model.max_length(prep.ids.len()));
    if lens.is_empty() {
        return Err(Error::NoCandidate(Vec::new()));
    }
    Ok((lens, dist))
}

fn better(cand: &DecodeResult, best: &Option<DecodeResult>) -> bool {
    match best {
        None => true,
        Some(b) => cand.log_score > b.log_score || (cand.log_score == b.log_score && cand.length < b.length),
    }
}

fn score(dist: &Array, tokens: &[usize]) -> f64 {
    tokens.iter().enumerate().map(|(i, &y)| dist.get(&[i, y]).ln()).sum()
}

/// Unconstrained prediction with the independent or copy decoder.
pub fn predict(model: &Model, source: &[usize], k: usize) -> Result<DecodeResult> {
    if model.config.decoder == DecoderVariant::Autoregressive {
        return predict_autoregressive(model, source, k);
    }
    decode_with(model, source, k, |dist| {
        let l = dist.shape()[0];
        Ok(Some((0..l).map(|i| argmax(dist.row_slice(i))).collect()))
    })
}

/// Prediction restricted to strings of the grammar. Lengths without a parse
/// are skipped; the top-k list is not refilled.
pub fn predict_grammar(model: &Model, source: &[usize], grammar: &CompiledGrammar, k: usize) -> Result<DecodeResult> {
    if model.config.decoder == DecoderVariant::Autoregressive {
        return Err(Error::Config("grammar decoding needs a non-autoregressive decoder".into()));
    }
    decode_with(model, source, k, |dist| match viterbi_cyk(dist, grammar) {
        Ok((y, _)) => Ok(Some(y)),
        Err(Error::NoParse(_)) => Ok(None),
        Err(e) => Err(e),
    })
}

fn decode_with(
    model: &Model,
    source: &[usize],
    k: usize,
    mut pick: impl FnMut(&Array) -> Result<Option<Vec<usize>>>,
) -> Result<DecodeResult> {
    let mut g = Graph::new(&model.params);
    let prep = model.prepare(&mut g, source)?;
    let (lens, len_dist) = candidate_lengths(model, &g, &prep, k)?;
    let mut best: Option<DecodeResult> = None;
    for &l in &lens {
        let al = model.align(&mut g, &prep, l)?;
        let out = model.output_distributions(&mut g, &prep, &al)?;
        let dist = g.tape.value(out).clone();
        let Some(tokens) = pick(&dist)? else { continue };
        let cand = DecodeResult {
            log_score: len_dist[l].ln() + score(&dist, &tokens),
            tokens,
            length: l,
            distributions: Some(dist),
        };
        if better(&cand, &best) {
            best = Some(cand);
        }
    }
    best.ok_or(Error::NoCandidate(lens))
}

/// Greedy left-to-right decoding per candidate length.
pub fn predict_autoregressive(model: &Model, source: &[usize], k: usize) -> Result<DecodeResult> {
    if model.config.decoder != DecoderVariant::Autoregressive {
        return Err(Error::Config("model does not use the autoregressive decoder".into()));
    }
    let mut g = Graph::new(&model.params);
    let prep = model.prepare(&mut g, source)?;
    let (lens, len_dist) = candidate_lengths(model, &g, &prep, k)?;
    let v = model.target_vocab_size();
    let mut best: Option<DecodeResult> = None;
    for &l in &lens {
        let al = model.align(&mut g, &prep, l)?;
        let mut tokens = Vec::with_capacity(l);
        let mut rows = Vec::with_capacity(l * v);
        let mut log_score = len_dist[l].ln();
        for _ in 0..l {
            let out = model.autoregressive_distributions(&mut g, &prep, &al, &tokens)?;
            let last = g.tape.value(out).row_slice(tokens.len()).to_vec();
            let y = argmax(&last);
            log_score += last[y].ln();
            rows.extend_from_slice(&last);
            tokens.push(y);
        }
        let cand = DecodeResult {
            tokens,
            length: l,
            log_score,
            distributions: Some(Array::new([l, v], rows)?),
        };
        if better(&cand, &best) {
            best = Some(cand);
        }
    }
    best.ok_or(Error::NoCandidate(lens))
}

/// Dispatches on decoder variant and grammar.
pub fn decode(model: &Model, source: &[usize], k: usize, grammar: Option<&CompiledGrammar>) -> Result<DecodeResult> {
    match grammar {
        Some(gr) => predict_grammar(model, source, gr, k),
        None => predict(model, source, k),
    }
}

/// `P(y | x)` factors used for scoring an arbitrary candidate: returns
/// `log P(l | x) + Σ log P(y_i | ·)`, or `-inf` if `l` is infeasible.
pub fn sequence_log_score(model: &Model, source: &[usize], target: &[usize]) -> Result<f64> {
    let mut g = Graph::new(&model.params);
    let prep = model.prepare(&mut g, source)?;
    let l = target.len();
    let p_len = g.tape.value(prep.length_dist).data().get(l).copied().unwrap_or(0.0);
    if l == 0 || p_len <= 0.0 {
        return Ok(f64::NEG_INFINITY);
    }
    let al = model.align(&mut g, &prep, l)?;
    let out = model.target_distributions(&mut g, &prep, &al, target)?;
    Ok(p_len.ln() + score(g.tape.value(out), target))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_k_ordering_and_ties() {
        let dist = [0.1, 0.2, 0.3, 0.3, 0.0, 0.1];
        assert_eq!(top_k_lengths(&dist, 2, 5), vec![2, 3]);
        assert_eq!(top_k_lengths(&dist, 10, 5), vec![2, 3, 1, 5]);
        assert_eq!(top_k_lengths(&dist, 10, 2), vec![2, 1]);
        assert!(top_k_lengths(&[1.0, 0.0], 3, 1).is_empty());
    }

    #[test]
    fn argmax_prefers_smaller_index() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
        assert_eq!(argmax(&[0.5]), 0);
    }
}
