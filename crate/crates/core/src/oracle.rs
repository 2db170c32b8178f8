//! Brute-force reference implementations. Nothing here calls into the
//! production dynamic programs; every quantity is obtained by enumeration.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::grammar::CompiledGrammar;
use crate::inference::sequence_log_score;
use crate::model::Model;
use crate::tensor::Array;

/// Largest number of fertility vectors the enumerator will visit.
pub const MAX_FERTILITY_VECTORS: usize = 1_000_000;
/// Longest sequence the tree enumerator accepts.
pub const MAX_TREE_LENGTH: usize = 7;
/// Largest number of candidate outputs the exhaustive decoder will score.
pub const MAX_CANDIDATES: usize = 1_000_000;

fn checked_pow(base: usize, exp: usize) -> Option<usize> {
    (0..exp).try_fold(1usize, |acc, _| acc.checked_mul(base))
}

/// Calls `visit` with every vector in `{0..=d}^n` (odometer order).
fn for_each_vector(n: usize, d: usize, mut visit: impl FnMut(&[usize])) {
    let mut f = vec![0usize; n];
    loop {
        visit(&f);
        let mut i = 0;
        while i < n && f[i] == d {
            f[i] = 0;
            i += 1;
        }
        if i == n {
            return;
        }
        f[i] += 1;
    }
}

fn table_dims(probs: &Array) -> Result<(usize, usize)> {
    match probs.dims2() {
        Some((n, c)) if n >= 1 && c >= 2 => Ok((n, c - 1)),
        _ => Err(Error::shape("oracle", &[probs.shape()])),
    }
}

fn guard_vectors(n: usize, d: usize) -> Result<()> {
    match checked_pow(d + 1, n) {
        Some(c) if c <= MAX_FERTILITY_VECTORS => Ok(()),
        _ => Err(Error::OracleLimit(format!("(d+1)^n with n={n}, d={d} exceeds {MAX_FERTILITY_VECTORS}"))),
    }
}

/// `P(Σ f = h)` for `h ∈ 0..=n·d` by summing over all fertility vectors.
pub fn enum_length_distribution(probs: &Array) -> Result<Vec<f64>> {
    let (n, d) = table_dims(probs)?;
    guard_vectors(n, d)?;
    let mut out = vec![0.0; n * d + 1];
    for_each_vector(n, d, |f| {
        let w: f64 = f.iter().enumerate().map(|(i, &k)| probs.get(&[i, k])).product();
        out[f.iter().sum::<usize>()] += w;
    });
    Ok(out)
}

/// Exact `F̄[i][j][u]`: the probability, given `Σ f = length`, that the
/// `j`-th intermediate token is copy `u` of input `i`.
pub fn enum_fertility_marginals(probs: &Array, length: usize) -> Result<Array> {
    let (n, d) = table_dims(probs)?;
    guard_vectors(n, d)?;
    let mut acc = vec![0.0; n * length * d];
    let mut total = 0.0;
    for_each_vector(n, d, |f| {
        if f.iter().sum::<usize>() != length {
            return;
        }
        let w: f64 = f.iter().enumerate().map(|(i, &k)| probs.get(&[i, k])).product();
        if w == 0.0 {
            return;
        }
        total += w;
        let mut pos = 0;
        for (i, &k) in f.iter().enumerate() {
            for u in 0..k {
                acc[(i * length + pos) * d + u] += w;
                pos += 1;
            }
        }
    });
    if total == 0.0 {
        let dist = enum_length_distribution(probs)?;
        return Err(Error::InfeasibleLength {
            length,
            support: (0..dist.len()).filter(|&h| dist[h] > 0.0).collect(),
        });
    }
    acc.iter_mut().for_each(|x| *x /= total);
    Array::new([n, length, d], acc)
}

/// One labelled binary permutation tree: its total score and the source
/// positions listed in output order.
#[derive(Clone, Debug)]
pub struct TreeYield {
    pub score: f64,
    pub order: Vec<usize>,
}

/// All labelled trees over `[i, j)`; `score(i, j, inverted)` scores a node.
pub fn enumerate_trees(i: usize, j: usize, score: &dyn Fn(usize, usize, bool) -> f64) -> Vec<TreeYield> {
    if j - i == 1 {
        return vec![TreeYield {
            score: 0.0,
            order: vec![i],
        }];
    }
    let mut out = Vec::new();
    for k in i + 1..j {
        let left = enumerate_trees(i, k, score);
        let right = enumerate_trees(k, j, score);
        for a in &left {
            for b in &right {
                for inverted in [false, true] {
                    let (first, second) = if inverted { (b, a) } else { (a, b) };
                    let mut order = first.order.clone();
                    order.extend_from_slice(&second.order);
                    out.push(TreeYield {
                        score: a.score + b.score + score(i, j, inverted),
                        order,
                    });
                }
            }
        }
    }
    out
}

/// Number of labelled binary trees over `l` leaves, by enumeration.
pub fn count_trees(l: usize) -> Result<usize> {
    if l == 0 || l > MAX_TREE_LENGTH {
        return Err(Error::OracleLimit(format!("tree enumeration needs 1 <= l <= {MAX_TREE_LENGTH}")));
    }
    Ok(enumerate_trees(0, l, &|_, _, _| 0.0).len())
}

/// Exact expected permutation matrix: entry `[s][t]` is the probability
/// that source position `s` lands at output position `t`, with tree
/// probabilities proportional to `exp` of summed node scores.
///
/// `scores(i, j, inverted)` gives the score of span `[i, j)`.
pub fn enum_tree_expectation(l: usize, scores: &dyn Fn(usize, usize, bool) -> f64) -> Result<Array> {
    if l == 0 || l > MAX_TREE_LENGTH {
        return Err(Error::OracleLimit(format!("tree enumeration needs 1 <= l <= {MAX_TREE_LENGTH}")));
    }
    let trees = enumerate_trees(0, l, scores);
    let max = trees.iter().map(|t| t.score).fold(f64::NEG_INFINITY, f64::max);
    let mut out = Array::zeros([l, l]);
    let mut total = 0.0;
    for t in &trees {
        let w = (t.score - max).exp();
        total += w;
        for (target, &source) in t.order.iter().enumerate() {
            let v = out.get(&[source, target]);
            out.set(&[source, target], v + w);
        }
    }
    out.data_mut().iter_mut().for_each(|x| *x /= total);
    Ok(out)
}

/// Membership test by memoized top-down expansion from the start symbol.
pub fn derives(grammar: &CompiledGrammar, word: &[usize]) -> bool {
    fn go(g: &CompiledGrammar, w: &[usize], a: usize, i: usize, j: usize, memo: &mut HashMap<(usize, usize, usize), bool>) -> bool {
        if let Some(&r) = memo.get(&(a, i, j)) {
            return r;
        }
        let r = if j - i == 1 {
            g.lexical.iter().any(|&(lhs, c)| lhs == a && c == w[i])
        } else {
            g.binary.iter().filter(|r| r.0 == a).any(|&(_, b, c)| {
                (i + 1..j).any(|k| go(g, w, b, i, k, memo) && go(g, w, c, k, j, memo))
            })
        };
        memo.insert((a, i, j), r);
        r
    }
    !word.is_empty() && go(grammar, word, grammar.start, 0, word.len(), &mut HashMap::new())
}

/// Calls `visit` with every word in `{0..v}^l` in lexicographic order.
fn for_each_word(l: usize, v: usize, mut visit: impl FnMut(&[usize])) {
    if v == 0 {
        return;
    }
    let mut w = vec![0usize; l];
    loop {
        visit(&w);
        let mut i = l;
        loop {
            if i == 0 {
                return;
            }
            i -= 1;
            if w[i] + 1 < v {
                w[i] += 1;
                break;
            }
            w[i] = 0;
        }
    }
}

/// Highest-probability word of length `l` in the grammar's language under
/// independent per-position distributions (`l × V`), by enumeration. Ties
/// go to the lexicographically smallest word.
pub fn brute_force_grammatical_argmax(distributions: &Array, grammar: &CompiledGrammar) -> Result<Option<(Vec<usize>, f64)>> {
    let (l, v) = distributions
        .dims2()
        .ok_or_else(|| Error::shape("brute_force_grammatical_argmax", &[distributions.shape()]))?;
    match checked_pow(v, l) {
        Some(c) if c <= MAX_CANDIDATES => {}
        _ => return Err(Error::OracleLimit(format!("{v}^{l} candidates exceed {MAX_CANDIDATES}"))),
    }
    let mut best: Option<(Vec<usize>, f64)> = None;
    for_each_word(l, v, |w| {
        let s: f64 = w.iter().enumerate().map(|(i, &y)| distributions.get(&[i, y]).ln()).sum();
        if s == f64::NEG_INFINITY || best.as_ref().is_some_and(|b| s <= b.1) {
            return;
        }
        if derives(grammar, w) {
            best = Some((w.to_vec(), s));
        }
    });
    Ok(best)
}

/// Best `(length, output, score)` over every output of length `1..=max_len`
/// drawn from the first `vocab_limit` target ids, scored with the model's
/// own probability functions. `accept` filters candidates (e.g. by
/// grammar membership).
pub fn exhaustive_decode(
    model: &Model,
    source: &[usize],
    max_len: usize,
    vocab_limit: usize,
    accept: Option<&dyn Fn(&[usize]) -> bool>,
) -> Result<Option<(usize, Vec<usize>, f64)>> {
    let v = vocab_limit.min(model.target_vocab_size());
    let count = (1..=max_len).try_fold(0usize, |acc, l| checked_pow(v, l).and_then(|c| acc.checked_add(c)));
    match count {
        Some(c) if c <= MAX_CANDIDATES => {}
        _ => return Err(Error::OracleLimit(format!("more than {MAX_CANDIDATES} candidates"))),
    }
    let mut best: Option<(usize, Vec<usize>, f64)> = None;
    let mut failure = None;
    for l in 1..=max_len {
        for_each_word(l, v, |w| {
            if failure.is_some() || accept.is_some_and(|f| !f(w)) {
                return;
            }
            match sequence_log_score(model, source, w) {
                Ok(s) if s > f64::NEG_INFINITY && best.as_ref().is_none_or(|b| s > b.2) => {
                    best = Some((l, w.to_vec(), s));
                }
                Ok(_) => {}
                Err(e) => failure = Some(e),
            }
        });
    }
    match failure {
        Some(e) => Err(e),
        None => Ok(best),
    }
}

/// Central finite differences of `f` at `x`.
pub fn finite_difference_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|k| {
            probe[k] = x[k] + step;
            let plus = f(&probe);
            probe[k] = x[k] - step;
            let minus = f(&probe);
            probe[k] = x[k];
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tree_counts() {
        let counts: Vec<usize> = (2..=6).map(|l| count_trees(l).unwrap()).collect();
        assert_eq!(counts, vec![2, 8, 40, 224, 1344]);
        let catalan = [1, 1, 2, 5, 14, 42];
        for l in 2..=6 {
            assert_eq!(counts[l - 2], catalan[l - 1] << (l - 1));
        }
        assert!(count_trees(8).is_err());
    }

    #[test]
    fn uniform_pair() {
        let r = enum_tree_expectation(2, &|_, _, _| 0.0).unwrap();
        assert_eq!(r.data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn one_hot_tree_gives_dcab() {
        // inverted root over (straight a b) and (inverted c d)
        let score = |i: usize, j: usize, inv: bool| -> f64 {
            let want_inv = match (i, j) {
                (0, 4) => Some(true),
                (0, 2) => Some(false),
                (2, 4) => Some(true),
                _ => None,
            };
            match want_inv {
                Some(w) if w == inv => 0.0,
                _ => -200.0,
            }
        };
        let r = enum_tree_expectation(4, &score).unwrap();
        // output order d c a b: source a (0) at position 2, b at 3, c at 1, d at 0
        let expect = [(0, 2), (1, 3), (2, 1), (3, 0)];
        for (s, t) in expect {
            assert!((r.get(&[s, t]) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn fertility_uniform_two_inputs() {
        let p = Array::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        let f = enum_fertility_marginals(&p, 1).unwrap();
        assert_eq!(f.data(), &[0.5, 0.5]);
        assert!(matches!(enum_fertility_marginals(&p, 3), Err(Error::InfeasibleLength { .. })));
        assert_eq!(enum_length_distribution(&p).unwrap(), vec![0.25, 0.5, 0.25]);
    }

    #[test]
    fn deterministic_fertility_is_binary() {
        let p = Array::from_rows(&[vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        let f = enum_fertility_marginals(&p, 3).unwrap();
        assert!(f.data().iter().all(|&x| x == 0.0 || x == 1.0));
        assert_eq!(f.get(&[1, 2, 1]), 1.0);
    }

    #[test]
    fn words_enumerate_lexicographically() {
        let mut seen = Vec::new();
        for_each_word(2, 2, |w| seen.push(w.to_vec()));
        assert_eq!(seen, vec![vec![0, 0], vec![0, 1], vec![1, 0], vec![1, 1]]);
    }

    #[test]
    fn finite_differences_of_quadratic() {
        let g = finite_difference_grad(|x| x.iter().map(|v| v * v).sum(), &[1.0, 2.0, 3.0], 1e-6);
        for (a, b) in g.iter().zip([2.0, 4.0, 6.0]) {
            assert!((a - b).abs() < 1e-8);
        }
    }
}
