//! Training objective, IBM-1 guidance alignments and the optimization loop.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::data::Example;
use crate::error::{Error, Result};
use crate::inference;
use crate::model::{Model, ModelConfig};
use crate::params::{Graph, ParameterStore};
use crate::tensor::Array;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// `λ1`, weight of the length term.
    pub length_weight: f64,
    /// `λ2`, weight of the guidance term.
    pub guidance_weight: f64,
    /// `m`, number of leading epochs that use guidance.
    pub guidance_epochs: usize,
    /// `χ`, minimum IBM-1 posterior for a guidance link.
    pub guidance_threshold: f64,
    /// Whether guidance alignments are extracted at all.
    pub guidance: bool,
    pub ibm1_iterations: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Stop once dev exact match reaches this value.
    pub early_stop: Option<f64>,
    /// Dev examples scored per epoch (all when `None`).
    pub dev_limit: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            length_weight: 1.0,
            guidance_weight: 1.0,
            guidance_epochs: 10,
            guidance_threshold: 0.6,
            guidance: false,
            ibm1_iterations: 10,
            epochs: 100,
            learning_rate: 1e-3,
            clip_norm: 5.0,
            seed: 1,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            early_stop: None,
            dev_limit: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if !(self.length_weight >= 0.0 && self.guidance_weight >= 0.0) {
            return bad("loss weights must be >= 0");
        }
        if !(self.guidance_threshold > 0.0 && self.guidance_threshold <= 1.0) {
            return bad("guidance_threshold must lie in (0, 1]");
        }
        if !(self.learning_rate > 0.0 && self.clip_norm > 0.0 && self.epsilon > 0.0) {
            return bad("learning_rate, clip_norm and epsilon must be > 0");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("Adam betas must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Everything `train` needs, as one JSON document.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }
}

/// IBM Model 1 lexical table `t(y | x)`; source index `num_source` is NULL.
#[derive(Clone, Debug, PartialEq)]
pub struct TranslationTable {
    pub num_source: usize,
    pub num_target: usize,
    probs: Vec<f64>,
}

impl TranslationTable {
    pub fn uniform(num_source: usize, num_target: usize) -> Self {
        TranslationTable {
            num_source,
            num_target,
            probs: vec![1.0 / num_target as f64; (num_source + 1) * num_target],
        }
    }

    pub fn null(&self) -> usize {
        self.num_source
    }

    pub fn prob(&self, y: usize, x: usize) -> f64 {
        self.probs[x * self.num_target + y]
    }

    /// `P(a_i = j | x, y)` for `j` over the source positions then NULL.
    pub fn posteriors(&self, source: &[usize], y: usize) -> Vec<f64> {
        let mut post: Vec<f64> = source.iter().chain([&self.null()]).map(|&x| self.prob(y, x)).collect();
        let z: f64 = post.iter().sum();
        if z > 0.0 {
            post.iter_mut().for_each(|p| *p /= z);
        }
        post
    }

    /// `Σ_s Σ_i log(Σ_j t(y_i | x_j) / (n + 1))`.
    pub fn log_likelihood(&self, corpus: &[(Vec<usize>, Vec<usize>)]) -> f64 {
        let mut ll = 0.0;
        for (src, tgt) in corpus.iter().filter(|(s, t)| !s.is_empty() && !t.is_empty()) {
            let norm = (src.len() + 1) as f64;
            for &y in tgt {
                let s: f64 = src.iter().chain([&self.null()]).map(|&x| self.prob(y, x)).sum();
                ll += (s / norm).ln();
            }
        }
        ll
    }
}

#[derive(Clone, Debug)]
pub struct Ibm1Result {
    pub table: TranslationTable,
    /// Corpus log-likelihood before each iteration and after the last.
    pub log_likelihoods: Vec<f64>,
}

/// EM for IBM Model 1 over id sequences, from a uniform table.
pub fn ibm1_train(
    corpus: &[(Vec<usize>, Vec<usize>)],
    num_source: usize,
    num_target: usize,
    iterations: usize,
) -> Result<Ibm1Result> {
    if corpus.is_empty() {
        return Err(Error::Config("IBM-1 needs a non-empty corpus".into()));
    }
    if num_target == 0 {
        return Err(Error::Config("IBM-1 needs a non-empty target vocabulary".into()));
    }
    for (idx, (s, t)) in corpus.iter().enumerate() {
        if s.is_empty() || t.is_empty() {
            log::warn!("IBM-1: skipping empty pair {idx}");
        }
        if s.iter().any(|&x| x >= num_source) || t.iter().any(|&y| y >= num_target) {
            return Err(Error::Example {
                index: idx,
                msg: "token id outside vocabulary".into(),
            });
        }
    }
    let mut table = TranslationTable::uniform(num_source, num_target);
    let mut lls = vec![table.log_likelihood(corpus)];
    for _ in 0..iterations {
        let mut counts = vec![0.0; table.probs.len()];
        for (src, tgt) in corpus.iter().filter(|(s, t)| !s.is_empty() && !t.is_empty()) {
            for &y in tgt {
                let post = table.posteriors(src, y);
                for (&x, p) in src.iter().chain([&table.null()]).zip(post) {
                    counts[x * num_target + y] += p;
                }
            }
        }
        for row in counts.chunks_mut(num_target) {
            let total: f64 = row.iter().sum();
            if total > 0.0 {
                row.iter_mut().for_each(|c| *c /= total);
            } else {
                row.iter_mut().for_each(|c| *c = 1.0 / num_target as f64);
            }
        }
        table.probs = counts;
        lls.push(table.log_likelihood(corpus));
    }
    Ok(Ibm1Result {
        table,
        log_likelihoods: lls,
    })
}

/// Links `(source j, target i)` whose posterior is at least `threshold`,
/// excluding NULL.
pub fn extract_guidance(table: &TranslationTable, corpus: &[(Vec<usize>, Vec<usize>)], threshold: f64) -> Vec<Vec<(usize, usize)>> {
    corpus
        .iter()
        .map(|(src, tgt)| {
            let mut links = Vec::new();
            if src.is_empty() {
                return links;
            }
            for (i, &y) in tgt.iter().enumerate() {
                let post = table.posteriors(src, y);
                for (j, &p) in post[..src.len()].iter().enumerate() {
                    if p >= threshold {
                        links.push((j, i));
                    }
                }
            }
            links
        })
        .collect()
}

/// An example encoded against a model's vocabularies.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoded {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
    /// Guidance links `(source index, target index)`.
    pub guidance: Vec<(usize, usize)>,
}

pub fn encode_examples(model: &Model, examples: &[Example]) -> Result<Vec<Encoded>> {
    examples
        .iter()
        .enumerate()
        .map(|(index, ex)| {
            let wrap = |e: Error| Error::Example { index, msg: e.to_string() };
            Ok(Encoded {
                source: model.encode_source(&ex.source).map_err(wrap)?,
                target: model.encode_target(&ex.target).map_err(wrap)?,
                guidance: Vec::new(),
            })
        })
        .collect()
}

/// The per-example loss as a scalar node on `g`:
/// `-λ1·log P(l|x) - Σ_i log P(y_i|·) - [epoch < m]·λ2·Σ_(j,i) log A[j][i]`.
pub fn example_loss(model: &Model, g: &mut Graph, ex: &Encoded, epoch: usize, cfg: &TrainConfig) -> Result<Var> {
    let l = ex.target.len();
    let n = ex.source.len();
    if l == 0 || l > model.max_length(n) {
        return Err(Error::InfeasibleLength {
            length: l,
            support: (1..=model.max_length(n)).collect(),
        });
    }
    let prep = model.prepare(g, &ex.source)?;
    let al = model.align(g, &prep, l)?;
    let out = model.target_distributions(g, &prep, &al, &ex.target)?;
    let v = model.target_vocab_size();
    let flat: Vec<usize> = ex.target.iter().enumerate().map(|(i, &y)| i * v + y).collect();
    let probs = g.tape.pick(out, &flat)?;
    let logs = g.tape.log(probs)?;
    let ll = g.tape.sum(logs)?;
    let mut loss = g.tape.scale(ll, -1.0)?;
    if cfg.length_weight != 0.0 {
        let pl = g.tape.pick(prep.length_dist, &[l])?;
        let lp = g.tape.log(pl)?;
        let lp = g.tape.sum(lp)?;
        let term = g.tape.scale(lp, -cfg.length_weight)?;
        loss = g.tape.add(loss, term)?;
    }
    if epoch < cfg.guidance_epochs && cfg.guidance_weight != 0.0 && !ex.guidance.is_empty() {
        let term = guidance_term(model, g, &prep, &al, &ex.guidance)?;
        let term = g.tape.scale(term, -cfg.guidance_weight)?;
        loss = g.tape.add(loss, term)?;
    }
    Ok(loss)
}

/// `Σ_(j,i) log Σ_{k,u} F̄[j][k][u]·R̄[k][i]`, always `≤ 0`.
pub fn guidance_term(
    model: &Model,
    g: &mut Graph,
    prep: &crate::model::Prepared,
    al: &crate::model::Alignment,
    links: &[(usize, usize)],
) -> Result<Var> {
    let n = prep.ids.len();
    if let Some(&(j, i)) = links.iter().find(|&&(j, i)| j >= n || i >= al.length) {
        return Err(Error::Domain {
            op: "guidance",
            msg: format!("link ({j}, {i}) outside {n}x{}", al.length),
        });
    }
    let a = model.input_output_alignment(g, prep, al)?;
    let flat: Vec<usize> = links.iter().map(|&(j, i)| j * al.length + i).collect();
    let picked = g.tape.pick(a, &flat)?;
    let logs = g.tape.log(picked)?;
    g.tape.sum(logs)
}

/// Loss value and parameter gradients for one example.
pub fn loss_and_grads(model: &Model, ex: &Encoded, epoch: usize, cfg: &TrainConfig) -> Result<(f64, Vec<Option<Array>>)> {
    let mut g = Graph::new(&model.params);
    let loss = example_loss(model, &mut g, ex, epoch, cfg)?;
    g.tape.backward(loss)?;
    let value = g.tape.value(loss).data()[0];
    let mut grads = vec![None; model.params.len()];
    for (id, grad) in g.param_grads() {
        grads[id.index()] = Some(grad.clone());
    }
    Ok((value, grads))
}

/// Adam with global-norm gradient clipping.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    clip_norm: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParameterStore, cfg: &TrainConfig) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, a)| vec![0.0; a.len()]).collect();
        Adam {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            epsilon: cfg.epsilon,
            clip_norm: cfg.clip_norm,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update; returns the pre-clipping global gradient norm.
    /// Parameters without a gradient are treated as having zero gradient.
    pub fn update(&mut self, store: &mut ParameterStore, grads: &[Option<Array>]) -> f64 {
        let norm = grads
            .iter()
            .flatten()
            .flat_map(|g| g.data())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        let scale = if norm > self.clip_norm { self.clip_norm / norm } else { 1.0 };
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let grad = grads[k].as_ref().map(|g| g.data());
            let p = store.get_mut(id).data_mut();
            for idx in 0..p.len() {
                let gi = grad.map_or(0.0, |g| g[idx] * scale);
                m[idx] = self.beta1 * m[idx] + (1.0 - self.beta1) * gi;
                v[idx] = self.beta2 * v[idx] + (1.0 - self.beta2) * gi * gi;
                p[idx] -= self.lr * (m[idx] / c1) / ((v[idx] / c2).sqrt() + self.epsilon);
            }
        }
        norm
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_exact_match: f64,
    pub wall_ms: u64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub metrics: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub best_dev_exact_match: f64,
}

/// Attaches IBM-1 guidance links to encoded training examples.
pub fn attach_guidance(model: &Model, data: &mut [Encoded], cfg: &TrainConfig) -> Result<()> {
    let corpus: Vec<_> = data.iter().map(|e| (e.source.clone(), e.target.clone())).collect();
    let ibm = ibm1_train(&corpus, model.vocab.source.len(), model.vocab.target.len(), cfg.ibm1_iterations)?;
    for (ex, links) in data.iter_mut().zip(extract_guidance(&ibm.table, &corpus, cfg.guidance_threshold)) {
        ex.guidance = links;
    }
    Ok(())
}

/// Exact-match accuracy of unconstrained predictions.
pub fn dev_accuracy(model: &Model, dev: &[Encoded]) -> Result<f64> {
    if dev.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0;
    for ex in dev {
        let pred = inference::predict(model, &ex.source, inference::DEFAULT_TOP_K)?;
        hits += usize::from(pred.tokens == ex.target);
    }
    Ok(hits as f64 / dev.len() as f64)
}

/// Trains `model` in place, one example per step. The parameters left in
/// `model` are those with the best dev exact match (earliest on ties).
/// One JSON line per epoch goes to `metrics_out` when given.
pub fn train(
    model: &mut Model,
    train_set: &[Example],
    dev_set: &[Example],
    cfg: &TrainConfig,
    mut metrics_out: Option<&mut dyn Write>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let mut data = encode_examples(model, train_set)?;
    for (index, ex) in data.iter().enumerate() {
        if ex.source.is_empty() || ex.target.is_empty() || ex.target.len() > model.max_length(ex.source.len()) {
            return Err(Error::Example {
                index,
                msg: format!(
                    "target length {} infeasible for source length {} with max fertility {}",
                    ex.target.len(),
                    ex.source.len(),
                    model.max_fertility()
                ),
            });
        }
    }
    if cfg.guidance && cfg.guidance_epochs > 0 {
        attach_guidance(model, &mut data, cfg)?;
    }
    let mut dev = encode_examples(model, dev_set)?;
    if let Some(limit) = cfg.dev_limit {
        dev.truncate(limit);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(&model.params, cfg);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut metrics = Vec::new();
    let mut best: Option<(f64, usize, ParameterStore)> = None;
    let start = Instant::now();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &idx in &order {
            let diverged = |loss: f64| Error::Diverged { epoch, example: idx, loss };
            let (loss, grads) = match loss_and_grads(model, &data[idx], epoch, cfg) {
                Ok(r) => r,
                Err(Error::NonFinite { .. }) => return Err(diverged(f64::NAN)),
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                return Err(diverged(loss));
            }
            total += loss;
            adam.update(&mut model.params, &grads);
        }
        let dev_em = dev_accuracy(model, &dev)?;
        let m = EpochMetrics {
            epoch,
            train_loss: total / data.len() as f64,
            dev_exact_match: dev_em,
            wall_ms: start.elapsed().as_millis() as u64,
        };
        log::info!(
            "epoch {} loss {:.5} dev {:.4} ({} ms)",
            m.epoch,
            m.train_loss,
            m.dev_exact_match,
            m.wall_ms
        );
        if let Some(w) = metrics_out.as_mut() {
            serde_json::to_writer(&mut **w, &m)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        metrics.push(m);
        if best.as_ref().is_none_or(|(b, _, _)| dev_em > *b) {
            best = Some((dev_em, epoch, model.params.clone()));
        }
        if cfg.early_stop.is_some_and(|t| dev_em >= t) {
            break;
        }
    }
    let (best_dev_exact_match, best_epoch) = match best {
        Some((acc, epoch, params)) => {
            model.params = params;
            (acc, epoch)
        }
        None => (0.0, 0),
    };
    Ok(TrainReport {
        metrics,
        best_epoch,
        best_dev_exact_match,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Vec<(Vec<usize>, Vec<usize>)> {
        // a b -> p q ; a -> p   (a=0, b=1; p=0, q=1)
        vec![(vec![0, 1], vec![0, 1]), (vec![0], vec![0])]
    }

    #[test]
    fn first_posteriors_are_uniform() {
        let t = TranslationTable::uniform(2, 2);
        for p in t.posteriors(&[0, 1], 0) {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn single_token_corpus_is_deterministic() {
        let r = ibm1_train(&[(vec![0], vec![0])], 1, 1, 1).unwrap();
        assert_eq!(r.table.prob(0, 0), 1.0);
    }

    #[test]
    fn em_increases_likelihood_and_rows_normalize() {
        let r = ibm1_train(&toy(), 2, 2, 20).unwrap();
        for w in r.log_likelihoods.windows(2) {
            assert!(w[1] >= w[0] - 1e-10);
        }
        for x in 0..=2 {
            let s: f64 = (0..2).map(|y| r.table.prob(y, x)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!(r.table.prob(0, 0) > r.table.prob(1, 0));
    }

    #[test]
    fn guidance_thresholds() {
        let uniform = TranslationTable::uniform(2, 2);
        assert!(extract_guidance(&uniform, &toy(), 0.34)[0].is_empty());
        let r = ibm1_train(&[(vec![0], vec![0]), (vec![1], vec![1])], 2, 2, 30).unwrap();
        let links = extract_guidance(&r.table, &[(vec![0, 1], vec![0, 1])], 0.6);
        assert_eq!(links[0], vec![(0, 0), (1, 1)]);
    }

    #[test]
    fn config_rejects_unknown_keys_and_bad_values() {
        assert!(ExperimentConfig::from_json(r#"{"train": {"epochz": 3}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"train": {"guidance_threshold": 0.0}}"#).is_err());
        let cfg = ExperimentConfig::from_json(r#"{"train": {"epochs": 3}}"#).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.model, ModelConfig::default());
    }

    #[test]
    fn adam_clips_to_global_norm() {
        let mut store = ParameterStore::new();
        store.insert("w", Array::vector(vec![0.0, 0.0])).unwrap();
        let cfg = TrainConfig {
            clip_norm: 1.0,
            learning_rate: 0.1,
            ..TrainConfig::default()
        };
        let mut adam = Adam::new(&store, &cfg);
        let norm = adam.update(&mut store, &[Some(Array::vector(vec![30.0, 40.0]))]);
        assert_eq!(norm, 50.0);
        // first Adam step moves each coordinate by ~lr regardless of scale
        for &p in store.iter().next().unwrap().1.data() {
            assert!((p + 0.1).abs() < 1e-6);
        }
    }
}
