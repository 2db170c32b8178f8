//! Fertility and reordering layers composed into a sequence transducer.
//!
//! With the fertility-first order, each input token is copied `f_i` times
//! (softly, through the marginal tensor `F̄`), each copy is tagged with a
//! learned copy-index embedding, and the resulting intermediate sequence is
//! reordered through the expected permutation `R̄`. With reordering first,
//! `R̄` permutes the inputs and the fertility step runs on the reordered
//! mixture. Either way the decoder marginalizes over the composed soft
//! alignment `A[(j, u), i]` between input copy `(j, u)` and output `i`.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::nn::{BiLstm, Linear, Lstm, Mlp, INIT_SCALE};
use crate::params::{Graph, ParamId, ParameterStore};
use crate::reordering;
use crate::tensor::Array;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Order {
    #[serde(rename = "F->R")]
    FertilityFirst,
    #[serde(rename = "R->F")]
    ReorderFirst,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderVariant {
    Independent,
    Copy,
    Autoregressive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub embedding_dim: usize,
    pub fertility_hidden: usize,
    pub reorder_hidden: usize,
    pub decoder_hidden: usize,
    pub mlp_hidden: usize,
    /// Maximum fertility `d`.
    pub max_fertility: usize,
    /// Fertility softmax temperature `τ`.
    pub temperature: f64,
    /// Scale `ρ` of the contextual part of the decoder input.
    pub rho: f64,
    pub order: Order,
    pub decoder: DecoderVariant,
    pub max_input_length: usize,
    /// Optional text embeddings (`token v1 v2 …` per line) for source tokens.
    pub embeddings_file: Option<PathBuf>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embedding_dim: 32,
            fertility_hidden: 32,
            reorder_hidden: 16,
            decoder_hidden: 16,
            mlp_hidden: 64,
            max_fertility: 4,
            temperature: 1.0,
            rho: 1.0,
            order: Order::FertilityFirst,
            decoder: DecoderVariant::Independent,
            max_input_length: 64,
            embeddings_file: None,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("embedding_dim", self.embedding_dim),
            ("fertility_hidden", self.fertility_hidden),
            ("reorder_hidden", self.reorder_hidden),
            ("decoder_hidden", self.decoder_hidden),
            ("mlp_hidden", self.mlp_hidden),
            ("max_fertility", self.max_fertility),
            ("max_input_length", self.max_input_length),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be >= 1")));
        }
        if !self.embedding_dim.is_multiple_of(2) {
            return Err(Error::Config("embedding_dim must be even (span features split it in halves)".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature {} must be > 0", self.temperature)));
        }
        if !self.rho.is_finite() {
            return Err(Error::Config("rho must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Layers {
    src_embed: ParamId,
    copy_embed: Option<ParamId>,
    fert_enc: BiLstm,
    fert_mlp: Mlp,
    reorder_enc: BiLstm,
    reorder_proj: Option<Linear>,
    span_mlp: Mlp,
    dec_enc: BiLstm,
    dec_proj: Option<Linear>,
    dec_hidden: Linear,
    dec_out: Linear,
    gate: Option<(Linear, ParamId)>,
    ar: Option<(ParamId, Lstm)>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub params: ParameterStore,
    layers: Layers,
    copy_map: Option<Vec<usize>>,
}

/// Length-independent quantities for one source sentence.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub ids: Vec<usize>,
    /// Source embeddings `n × E`.
    pub x: Var,
    /// Decoder input states `h'`, `n × E`.
    pub dec: Var,
    /// Fertility table `n × (d + 1)`.
    pub fertility: Var,
    /// `P(l | x)` for `l ∈ 0..=n·d`.
    pub length_dist: Var,
    /// Input-side expected permutation (reordering-first order only).
    pub input_perm: Option<Var>,
}

/// Soft alignments for one conditioned length.
#[derive(Clone, Copy, Debug)]
pub struct Alignment {
    pub length: usize,
    /// `F̄`, `n × l × d` (indexed by reordered position for reordering-first).
    pub fertility: Var,
    /// `R̄`, `l × l` (fertility-first) or `n × n` (reordering-first).
    pub permutation: Var,
    /// Composed alignment, `(n·d) × l`, row `j·d + u - 1`.
    pub composed: Var,
}

impl Model {
    pub fn new(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        if vocab.source.is_empty() || vocab.target.is_empty() {
            return Err(Error::Config("empty vocabulary".into()));
        }
        let copy_map = match config.decoder {
            DecoderVariant::Copy => Some(vocab.copy_map()?),
            _ => None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParameterStore::new();
        let c = &config;
        let e = c.embedding_dim;
        let d = c.max_fertility;
        let v_tgt = vocab.target.len();

        let src_embed = s.uniform("source.embedding", &[vocab.source.len(), e], INIT_SCALE, &mut rng)?;
        let copy_embed = match c.order {
            Order::FertilityFirst => Some(s.uniform("fertility.copy_embedding", &[d, e], INIT_SCALE, &mut rng)?),
            Order::ReorderFirst => None,
        };
        let fert_enc = BiLstm::new(&mut s, "fertility.lstm", e, c.fertility_hidden, &mut rng)?;
        let fert_mlp = Mlp::new(&mut s, "fertility.mlp", 2 * c.fertility_hidden, c.mlp_hidden, d + 1, &mut rng)?;
        let reorder_enc = BiLstm::new(&mut s, "reorder.lstm", e, c.reorder_hidden, &mut rng)?;
        let reorder_proj = (2 * c.reorder_hidden != e)
            .then(|| Linear::new(&mut s, "reorder.proj", 2 * c.reorder_hidden, e, &mut rng))
            .transpose()?;
        let span_mlp = Mlp::new(&mut s, "reorder.span_mlp", e, c.mlp_hidden, 2, &mut rng)?;
        let dec_enc = BiLstm::new(&mut s, "decoder.lstm", e, c.decoder_hidden, &mut rng)?;
        let dec_proj = (2 * c.decoder_hidden != e)
            .then(|| Linear::new(&mut s, "decoder.proj", 2 * c.decoder_hidden, e, &mut rng))
            .transpose()?;
        let dec_hidden = Linear::new(&mut s, "decoder.mlp", e, c.mlp_hidden, &mut rng)?;
        let dec_out = Linear::new(&mut s, "decoder.out", c.mlp_hidden, d * v_tgt, &mut rng)?;
        let gate = match c.decoder {
            DecoderVariant::Copy => Some((
                Linear::new(&mut s, "decoder.copy_gate", c.mlp_hidden, 1, &mut rng)?,
                s.zeros("decoder.copy_gate.per_copy_bias", &[d, 1])?,
            )),
            _ => None,
        };
        let ar = match c.decoder {
            DecoderVariant::Autoregressive => Some((
                s.uniform("decoder.target_embedding", &[v_tgt + 1, e], INIT_SCALE, &mut rng)?,
                Lstm::new(&mut s, "decoder.prefix_lstm", e, e, &mut rng)?,
            )),
            _ => None,
        };

        let mut model = Model {
            config,
            vocab,
            params: s,
            layers: Layers {
                src_embed,
                copy_embed,
                fert_enc,
                fert_mlp,
                reorder_enc,
                reorder_proj,
                span_mlp,
                dec_enc,
                dec_proj,
                dec_hidden,
                dec_out,
                gate,
                ar,
            },
            copy_map,
        };
        if let Some(path) = model.config.embeddings_file.clone() {
            model.load_source_embeddings(&path)?;
        }
        Ok(model)
    }

    /// Rebuilds a model around previously trained parameters.
    pub fn from_parts(config: ModelConfig, vocab: Vocabulary, params: ParameterStore) -> Result<Self> {
        let mut cfg = config;
        // The checkpoint already holds any loaded embeddings.
        cfg.embeddings_file = None;
        let mut model = Model::new(cfg.clone(), vocab, 0)?;
        if model.params.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                model.params.len(),
                params.len()
            )));
        }
        for (id, (name, value)) in model.params.ids().zip(params.iter()) {
            let expect = model.params.get(id);
            if model.params.name(id) != name || expect.shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name:?} {:?} does not match {:?} {:?}",
                    value.shape(),
                    model.params.name(id),
                    expect.shape()
                )));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn max_fertility(&self) -> usize {
        self.config.max_fertility
    }

    pub fn target_vocab_size(&self) -> usize {
        self.vocab.target.len()
    }

    fn load_source_embeddings(&mut self, path: &Path) -> Result<()> {
        let e = self.config.embedding_dim;
        let reader = BufReader::new(File::open(path)?);
        let id = self.layers.src_embed;
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            let mut parts = line.split_whitespace();
            let Some(token) = parts.next() else { continue };
            let Some(row) = self.vocab.source.id(token) else { continue };
            let values = parts
                .map(|p| p.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|err| Error::Dataset {
                    path: path.to_path_buf(),
                    line: lineno + 1,
                    msg: err.to_string(),
                })?;
            if values.len() != e {
                return Err(Error::Dataset {
                    path: path.to_path_buf(),
                    line: lineno + 1,
                    msg: format!("expected {e} values, found {}", values.len()),
                });
            }
            self.params.get_mut(id).data_mut()[row * e..(row + 1) * e].copy_from_slice(&values);
        }
        Ok(())
    }

    pub fn encode_source(&self, tokens: &[String]) -> Result<Vec<usize>> {
        self.vocab.source.encode(tokens)
    }

    pub fn encode_target(&self, tokens: &[String]) -> Result<Vec<usize>> {
        self.vocab.target.encode(tokens)
    }

    /// Largest conditioned length the fertility layer can produce.
    pub fn max_length(&self, n: usize) -> usize {
        n * self.config.max_fertility
    }

    /// Embeds and encodes the source, and computes the fertility table and
    /// length distribution (neither depends on the output length).
    pub fn prepare(&self, g: &mut Graph, ids: &[usize]) -> Result<Prepared> {
        let n = ids.len();
        if n == 0 || n > self.config.max_input_length {
            return Err(Error::Config(format!(
                "input length {n} outside 1..={}",
                self.config.max_input_length
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.vocab.source.len()) {
            return Err(Error::UnknownToken(format!("#{bad}")));
        }
        let l = &self.layers;
        let table = g.param(l.src_embed);
        let x = g.tape.embedding(table, ids)?;
        let dec = self.decoder_states(g, x)?;
        let (fert_input, input_perm) = match self.config.order {
            Order::FertilityFirst => (x, None),
            Order::ReorderFirst => {
                let scores = self.span_scores(g, x)?;
                let perm = g.tape.expected_permutation(scores, n)?;
                // z_k = Σ_i R̄[i][k] x_i
                let pt = g.tape.transpose(perm)?;
                (g.tape.matmul(pt, x)?, Some(perm))
            }
        };
        let states = l.fert_enc.forward(g, fert_input)?;
        let logits = l.fert_mlp.forward(g, states)?;
        let fertility = g.tape.softmax(logits, self.config.temperature)?;
        let length_dist = g.tape.length_distribution(fertility)?;
        Ok(Prepared {
            ids: ids.to_vec(),
            x,
            dec,
            fertility,
            length_dist,
            input_perm,
        })
    }

    /// `h'_j = ρ·[fwd_j; bwd_j] + x_j`, projected to `E` when needed.
    fn decoder_states(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let l = &self.layers;
        let mut ctx = l.dec_enc.forward(g, x)?;
        if let Some(p) = &l.dec_proj {
            ctx = p.forward(g, ctx)?;
        }
        let ctx = g.tape.scale(ctx, self.config.rho)?;
        g.tape.add(ctx, x)
    }

    /// Straight/inverted scores for every span of width ≥ 2 over the rows
    /// of `seq` (`m × E`), as a `[num_spans(m), 2]` array.
    pub fn span_scores(&self, g: &mut Graph, seq: Var) -> Result<Var> {
        let m = g.tape.shape(seq)[0];
        if m < 2 {
            return Ok(g.tape.constant(Array::zeros([0, 2])));
        }
        let l = &self.layers;
        let half = self.config.embedding_dim / 2;
        let mut ctx = l.reorder_enc.forward(g, seq)?;
        if let Some(p) = &l.reorder_proj {
            ctx = p.forward(g, ctx)?;
        }
        let r = g.tape.add(ctx, seq)?;
        let fwd = g.tape.slice(r, 1, 0, half)?;
        let bwd = g.tape.slice(r, 1, half, half)?;
        let pad = g.tape.constant(Array::zeros([1, half]));
        // fwd_pad[t] summarizes tokens < t; bwd_pad[t] summarizes tokens ≥ t.
        let fwd_pad = g.tape.concat(&[pad, fwd], 0)?;
        let bwd_pad = g.tape.concat(&[bwd, pad], 0)?;
        let (starts, ends): (Vec<usize>, Vec<usize>) = reordering::spans(m).unzip();
        let f_end = g.tape.gather(fwd_pad, &ends)?;
        let f_start = g.tape.gather(fwd_pad, &starts)?;
        let b_start = g.tape.gather(bwd_pad, &starts)?;
        let b_end = g.tape.gather(bwd_pad, &ends)?;
        let f_diff = g.tape.sub(f_end, f_start)?;
        let b_diff = g.tape.sub(b_start, b_end)?;
        let feats = g.tape.concat(&[f_diff, b_diff], 1)?;
        l.span_mlp.forward(g, feats)
    }

    /// Soft fertility and reordering alignments conditioned on output
    /// length `length`.
    pub fn align(&self, g: &mut Graph, prep: &Prepared, length: usize) -> Result<Alignment> {
        let n = prep.ids.len();
        let d = self.config.max_fertility;
        let fbar = g.tape.marginal_fertility(prep.fertility, length)?;
        match self.config.order {
            Order::FertilityFirst => {
                // rows (i, u) of F̄ as an (n·d) × l matrix
                let ft = g.tape.transpose(fbar)?;
                let fmat = g.tape.reshape(ft, &[n * d, length])?;
                let inter = self.intermediate(g, prep, fmat)?;
                let scores = self.span_scores(g, inter)?;
                let rbar = g.tape.expected_permutation(scores, length)?;
                let composed = g.tape.matmul(fmat, rbar)?;
                Ok(Alignment {
                    length,
                    fertility: fbar,
                    permutation: rbar,
                    composed,
                })
            }
            Order::ReorderFirst => {
                let rbar = prep.input_perm.expect("reorder-first prepares an input permutation");
                let flat = g.tape.reshape(fbar, &[n, length * d])?;
                let mixed = g.tape.matmul(rbar, flat)?;
                let mixed = g.tape.reshape(mixed, &[n, length, d])?;
                let mixed = g.tape.transpose(mixed)?;
                let composed = g.tape.reshape(mixed, &[n * d, length])?;
                Ok(Alignment {
                    length,
                    fertility: fbar,
                    permutation: rbar,
                    composed,
                })
            }
        }
    }

    /// `h_j = Σ_{i,u} F̄[i][j][u] (x_i + w_u)` as an `l × E` matrix.
    fn intermediate(&self, g: &mut Graph, prep: &Prepared, fmat: Var) -> Result<Var> {
        let n = prep.ids.len();
        let d = self.config.max_fertility;
        let copy = g.param(self.layers.copy_embed.expect("fertility-first has copy embeddings"));
        let rows: Vec<usize> = (0..n * d).map(|r| r / d).collect();
        let copies: Vec<usize> = (0..n * d).map(|r| r % d).collect();
        let xs = g.tape.gather(prep.x, &rows)?;
        let ws = g.tape.gather(copy, &copies)?;
        let tagged = g.tape.add(xs, ws)?;
        let ft = g.tape.transpose(fmat)?;
        g.tape.matmul(ft, tagged)
    }

    /// `P(y | x_j, u)` for every copy `(j, u)`, as an `(n·d) × V` matrix.
    fn copy_distributions(&self, g: &mut Graph, prep: &Prepared) -> Result<Var> {
        let n = prep.ids.len();
        let d = self.config.max_fertility;
        let v = self.target_vocab_size();
        let l = &self.layers;
        let hidden = l.dec_hidden.forward(g, prep.dec)?;
        let hidden = g.tape.tanh(hidden)?;
        let logits = l.dec_out.forward(g, hidden)?;
        let logits = g.tape.reshape(logits, &[n * d, v])?;
        let probs = g.tape.softmax(logits, 1.0)?;
        let Some((gate_layer, per_copy)) = &l.gate else {
            return Ok(probs);
        };
        let copy_map = self.copy_map.as_ref().expect("copy decoder has a copy map");
        let gate = gate_layer.forward(g, hidden)?;
        let rows: Vec<usize> = (0..n * d).map(|r| r / d).collect();
        let copies: Vec<usize> = (0..n * d).map(|r| r % d).collect();
        let gate = g.tape.gather(gate, &rows)?;
        let bias = g.param(*per_copy);
        let bias = g.tape.gather(bias, &copies)?;
        let gate = g.tape.add(gate, bias)?;
        let gate = g.tape.sigmoid(gate)?;
        let ones = g.tape.constant(Array::full([1, v], 1.0));
        let gate = g.tape.matmul(gate, ones)?;
        let mut onehot = Array::zeros([n * d, v]);
        for r in 0..n * d {
            onehot.set(&[r, copy_map[prep.ids[r / d]]], 1.0);
        }
        let onehot = g.tape.constant(onehot);
        let gated_gen = g.tape.mul(gate, probs)?;
        let kept = g.tape.sub(probs, gated_gen)?;
        let copied = g.tape.mul(gate, onehot)?;
        g.tape.add(kept, copied)
    }

    /// Per-position output distributions `l × V` for the non-autoregressive
    /// decoders.
    pub fn output_distributions(&self, g: &mut Graph, prep: &Prepared, align: &Alignment) -> Result<Var> {
        if self.config.decoder == DecoderVariant::Autoregressive {
            return Err(Error::Config("autoregressive decoder needs a target prefix".into()));
        }
        let p = self.copy_distributions(g, prep)?;
        let at = g.tape.transpose(align.composed)?;
        g.tape.matmul(at, p)
    }

    /// Autoregressive distributions for positions `0..=prefix.len()` given
    /// the (teacher-forced) target prefix. Returns `(prefix.len() + 1) × V`.
    pub fn autoregressive_distributions(
        &self,
        g: &mut Graph,
        prep: &Prepared,
        align: &Alignment,
        prefix: &[usize],
    ) -> Result<Var> {
        let (embed, lstm) = self
            .layers
            .ar
            .as_ref()
            .ok_or_else(|| Error::Config("model does not use the autoregressive decoder".into()))?;
        let n = prep.ids.len();
        let d = self.config.max_fertility;
        let v = self.target_vocab_size();
        let steps = prefix.len() + 1;
        if steps > align.length {
            return Err(Error::Config(format!(
                "prefix of length {} exceeds output length {}",
                prefix.len(),
                align.length
            )));
        }
        let l = &self.layers;
        let mut inputs = vec![v];
        inputs.extend_from_slice(prefix);
        let table = g.param(*embed);
        let emb = g.tape.embedding(table, &inputs)?;
        let states = lstm.forward(g, emb, false)?;
        let dec_rows: Vec<usize> = (0..steps * n).map(|r| r % n).collect();
        let state_rows: Vec<usize> = (0..steps * n).map(|r| r / n).collect();
        let dec = g.tape.gather(prep.dec, &dec_rows)?;
        let st = g.tape.gather(states, &state_rows)?;
        let inp = g.tape.add(dec, st)?;
        let hidden = l.dec_hidden.forward(g, inp)?;
        let hidden = g.tape.tanh(hidden)?;
        let logits = l.dec_out.forward(g, hidden)?;
        let logits = g.tape.reshape(logits, &[steps * n * d, v])?;
        let probs = g.tape.softmax(logits, 1.0)?;
        let mut rows = Vec::with_capacity(steps);
        for i in 0..steps {
            let block = g.tape.slice(probs, 0, i * n * d, n * d)?;
            let col = g.tape.slice(align.composed, 1, i, 1)?;
            let weights = g.tape.transpose(col)?;
            rows.push(g.tape.matmul(weights, block)?);
        }
        g.tape.concat(&rows, 0)
    }

    /// Distributions for all `l` positions, teacher-forcing `target` for the
    /// autoregressive decoder.
    pub fn target_distributions(&self, g: &mut Graph, prep: &Prepared, align: &Alignment, target: &[usize]) -> Result<Var> {
        match self.config.decoder {
            DecoderVariant::Autoregressive => {
                self.autoregressive_distributions(g, prep, align, &target[..align.length - 1])
            }
            _ => self.output_distributions(g, prep, align),
        }
    }

    /// Marginal probability that input `i` aligns to output `j`, `n × l`.
    pub fn input_output_alignment(&self, g: &mut Graph, prep: &Prepared, align: &Alignment) -> Result<Var> {
        let n = prep.ids.len();
        let d = self.config.max_fertility;
        let a = g.tape.reshape(align.composed, &[n, d, align.length])?;
        g.tape.sum_axis(a, 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Example, Vocab};

    fn vocab(tokens: &[&str]) -> Vocabulary {
        let v = Vocab::from(tokens.iter().map(|s| s.to_string()).collect::<Vec<_>>());
        Vocabulary {
            source: v.clone(),
            target: v,
        }
    }

    fn tiny(order: Order, decoder: DecoderVariant) -> Model {
        let cfg = ModelConfig {
            embedding_dim: 6,
            fertility_hidden: 3,
            reorder_hidden: 3,
            decoder_hidden: 2,
            mlp_hidden: 5,
            max_fertility: 2,
            order,
            decoder,
            ..ModelConfig::default()
        };
        Model::new(cfg, vocab(&["a", "b", "c"]), 11).unwrap()
    }

    fn row_sums(t: &Array) -> Vec<f64> {
        let (r, c) = t.dims2().unwrap();
        (0..r).map(|i| t.data()[i * c..(i + 1) * c].iter().sum()).collect()
    }

    #[test]
    fn output_rows_are_distributions() {
        for order in [Order::FertilityFirst, Order::ReorderFirst] {
            for dec in [DecoderVariant::Independent, DecoderVariant::Copy, DecoderVariant::Autoregressive] {
                let m = tiny(order, dec);
                let mut g = Graph::new(&m.params);
                let prep = m.prepare(&mut g, &[0, 2, 1]).unwrap();
                for l in 1..=6 {
                    let al = m.align(&mut g, &prep, l).unwrap();
                    let out = m.target_distributions(&mut g, &prep, &al, &vec![1; l]).unwrap();
                    let t = g.tape.value(out);
                    assert_eq!(t.shape(), &[l, 3]);
                    for s in row_sums(t) {
                        assert!((s - 1.0).abs() < 1e-6, "{order:?} {dec:?} l={l}: {s}");
                    }
                    assert!(t.data().iter().all(|&p| p >= 0.0));
                }
            }
        }
    }

    #[test]
    fn single_token_has_unit_length_vectors() {
        let m = tiny(Order::FertilityFirst, DecoderVariant::Independent);
        let mut g = Graph::new(&m.params);
        let prep = m.prepare(&mut g, &[1]).unwrap();
        assert_eq!(g.tape.shape(prep.x), &[1, 6]);
        assert_eq!(g.tape.shape(prep.dec), &[1, 6]);
        let ld = g.tape.value(prep.length_dist);
        assert!((ld.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rho_zero_is_skip_only() {
        let mut m = tiny(Order::FertilityFirst, DecoderVariant::Independent);
        m.config.rho = 0.0;
        let mut g = Graph::new(&m.params);
        let prep = m.prepare(&mut g, &[0, 1]).unwrap();
        assert_eq!(g.tape.value(prep.dec), g.tape.value(prep.x));
    }

    #[test]
    fn unknown_tokens_are_rejected() {
        let m = tiny(Order::FertilityFirst, DecoderVariant::Independent);
        assert!(matches!(m.encode_source(&["q".to_string()]), Err(Error::UnknownToken(_))));
        let mut g = Graph::new(&m.params);
        assert!(m.prepare(&mut g, &[7]).is_err());
    }

    #[test]
    fn copy_decoder_needs_shared_tokens() {
        let v = Vocabulary::build(&[Example::from_strs(&["a"], &["b"])]);
        let cfg = ModelConfig {
            decoder: DecoderVariant::Copy,
            ..ModelConfig::default()
        };
        assert!(matches!(Model::new(cfg, v, 0), Err(Error::Config(_))));
    }

    #[test]
    fn config_rejects_bad_values() {
        let bad = ModelConfig {
            temperature: 0.0,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            max_fertility: 0,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        let json = r#"{"embedding_dim": 8, "typo_field": 1}"#;
        assert!(serde_json::from_str::<ModelConfig>(json).is_err());
    }

    #[test]
    fn initialization_is_seeded() {
        let a = tiny(Order::FertilityFirst, DecoderVariant::Independent);
        let b = tiny(Order::FertilityFirst, DecoderVariant::Independent);
        assert_eq!(a.params, b.params);
    }
}
