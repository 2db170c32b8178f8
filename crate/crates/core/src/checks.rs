//! Self-check suites: finite-difference gradient checks and DP-versus-
//! enumeration comparisons. Each returns reports the CLI and the
//! acceptance harness print directly.

use std::fmt;
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Tape, Var};
use crate::data::{Vocab, Vocabulary};
use crate::error::Result;
use crate::fertility::{self, FertilityTable};
use crate::grammar::{viterbi_cyk, CompiledGrammar};
use crate::model::{DecoderVariant, Model, ModelConfig, Order};
use crate::oracle;
use crate::params::Graph;
use crate::reordering::{self, Orientation, SpanScores};
use crate::tensor::Array;
use crate::training::{example_loss, Encoded, TrainConfig};
use crate::Error;

/// Finite-difference step for every gradient check.
pub const FD_STEP: f64 = 1e-6;
/// Tolerance for single operations and the DP layers.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Tolerance for the end-to-end model loss.
pub const MODEL_TOLERANCE: f64 = 1e-3;
/// Tolerance for DP-versus-enumeration agreement.
pub const ORACLE_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Debug, Serialize)]
pub struct CheckReport {
    pub name: String,
    pub cases: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub elapsed_ms: u128,
}

impl CheckReport {
    fn finish(name: impl Into<String>, cases: usize, max_error: f64, tolerance: f64, start: Instant) -> Self {
        CheckReport {
            name: name.into(),
            cases,
            max_error,
            tolerance,
            passed: max_error <= tolerance,
            elapsed_ms: start.elapsed().as_millis(),
        }
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<28} cases={:<5} max_err={:.3e} tol={:.0e} {}ms",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.cases,
            self.max_error,
            self.tolerance,
            self.elapsed_ms
        )
    }
}

/// `max |a - b| / (|b| + 1e-8)` with `b` the finite-difference estimate.
pub fn relative_error(autodiff: &[f64], fd: &[f64]) -> f64 {
    autodiff
        .iter()
        .zip(fd)
        .map(|(a, b)| (a - b).abs() / (b.abs() + 1e-8))
        .fold(0.0, f64::max)
}

/// `‖a - b‖ / (‖b‖ + 1e-8)` over a whole tensor.
pub fn tensor_relative_error(autodiff: &[f64], fd: &[f64]) -> f64 {
    let diff: f64 = autodiff.iter().zip(fd).map(|(a, b)| (a - b) * (a - b)).sum();
    let norm: f64 = fd.iter().map(|b| b * b).sum();
    diff.sqrt() / (norm.sqrt() + 1e-8)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Array {
    let len = shape.iter().product();
    Array::new(shape, (0..len).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

struct Probe {
    inputs: Vec<Array>,
    build: Build,
}

fn probe(inputs: Vec<Array>, build: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static) -> Probe {
    Probe {
        inputs,
        build: Box::new(build),
    }
}

/// `Σ out ⊙ W` for a fixed random `W`.
fn weighted_loss(t: &mut Tape, out: Var, weights: &Array) -> Result<Var> {
    let w = t.constant(weights.clone());
    let prod = t.mul(out, w)?;
    t.sum(prod)
}

fn check_probe(p: &Probe, rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut t = Tape::new();
    let vars: Vec<Var> = p.inputs.iter().map(|a| t.var(a.clone())).collect();
    let out = (p.build)(&mut t, &vars)?;
    let weights = uniform(rng, t.shape(out), -1.0, 1.0);
    let loss = weighted_loss(&mut t, out, &weights)?;
    t.backward(loss)?;
    let mut worst = 0.0f64;
    for (k, input) in p.inputs.iter().enumerate() {
        let ad = t.grad(vars[k]).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; input.len()]);
        let eval = |x: &[f64]| -> f64 {
            let mut t = Tape::new();
            let vars: Vec<Var> = p
                .inputs
                .iter()
                .enumerate()
                .map(|(j, a)| {
                    if j == k {
                        t.var(Array::new(a.shape(), x.to_vec()).unwrap())
                    } else {
                        t.var(a.clone())
                    }
                })
                .collect();
            let out = (p.build)(&mut t, &vars).expect("perturbed forward");
            let loss = weighted_loss(&mut t, out, &weights).expect("perturbed loss");
            t.value(loss).data()[0]
        };
        let fd = oracle::finite_difference_grad(eval, input.data(), FD_STEP);
        worst = worst.max(relative_error(&ad, &fd));
    }
    Ok(worst)
}

fn dims(rng: &mut ChaCha8Rng, count: usize) -> Vec<usize> {
    (0..count).map(|_| rng.gen_range(1..=4)).collect()
}

fn random_input(rng: &mut ChaCha8Rng, rank: usize, lo: f64, hi: f64) -> Array {
    let shape = dims(rng, rank);
    uniform(rng, &shape, lo, hi)
}

/// `n ≤ 4`, `d ≤ 3` with `n·d ≥ 2`. Lengths are then drawn from
/// `1..n·d`: at `l = n·d` only one fertility vector is feasible, `F̄` is
/// constant and central differences measure pure rounding noise, so that
/// length is covered by [`constant_length_check`] instead.
fn fertility_shape(rng: &mut ChaCha8Rng) -> (usize, usize) {
    loop {
        let (n, d) = (rng.gen_range(1..=4), rng.gen_range(1..=3));
        if n * d >= 2 {
            return (n, d);
        }
    }
}

/// At `l = n·d` the marginal tensor does not depend on the fertility
/// table, so its gradient must vanish exactly (up to rounding).
pub fn constant_length_check(instances: usize, seed: u64) -> Result<CheckReport> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (n, d) = (rng.gen_range(1..=4), rng.gen_range(1..=3));
        let l = n * d;
        let mut t = Tape::new();
        let p = t.var(uniform(&mut rng, &[n, d + 1], 0.05, 1.0));
        let f = t.marginal_fertility(p, l)?;
        let w = uniform(&mut rng, &[n, l, d], -1.0, 1.0);
        let loss = weighted_loss(&mut t, f, &w)?;
        t.backward(loss)?;
        if let Some(g) = t.grad(p) {
            worst = worst.max(g.data().iter().fold(0.0, |m, x| m.max(x.abs())));
        }
    }
    Ok(CheckReport::finish("op/marginal_fertility@l=nd", instances, worst, 1e-12, start))
}

/// Random instances of every registered operation, by name.
fn op_probes(name: &str, rng: &mut ChaCha8Rng) -> Probe {
    match name {
        "add" | "sub" | "mul" => {
            let s = dims(rng, 2);
            let (a, b) = (uniform(rng, &s, -2.0, 2.0), uniform(rng, &s, -2.0, 2.0));
            let op = name.to_string();
            probe(vec![a, b], move |t, v| match op.as_str() {
                "add" => t.add(v[0], v[1]),
                "sub" => t.sub(v[0], v[1]),
                _ => t.mul(v[0], v[1]),
            })
        }
        "scale" => {
            let c = rng.gen_range(-3.0..3.0);
            probe(vec![random_input(rng, 2, -2.0, 2.0)], move |t, v| t.scale(v[0], c))
        }
        "add_row" => {
            let s = dims(rng, 2);
            let a = uniform(rng, &s, -2.0, 2.0);
            let r = uniform(rng, &[1, s[1]], -2.0, 2.0);
            probe(vec![a, r], |t, v| t.add_row(v[0], v[1]))
        }
        "matmul" => {
            let s = dims(rng, 3);
            let a = uniform(rng, &[s[0], s[1]], -2.0, 2.0);
            let b = uniform(rng, &[s[1], s[2]], -2.0, 2.0);
            probe(vec![a, b], |t, v| t.matmul(v[0], v[1]))
        }
        "transpose" => probe(vec![random_input(rng, 3, -2.0, 2.0)], |t, v| t.transpose(v[0])),
        "reshape" => {
            let s = dims(rng, 3);
            probe(vec![uniform(rng, &s, -2.0, 2.0)], move |t, v| t.reshape(v[0], &[s[0] * s[1], s[2]]))
        }
        "concat" => {
            let s = dims(rng, 2);
            let axis = rng.gen_range(0..2);
            let mut s2 = s.clone();
            s2[axis] = rng.gen_range(1..=3);
            let a = uniform(rng, &s, -2.0, 2.0);
            let b = uniform(rng, &s2, -2.0, 2.0);
            probe(vec![a, b], move |t, v| t.concat(&[v[0], v[1], v[0]], axis))
        }
        "slice" => {
            let s = dims(rng, 3);
            let axis = rng.gen_range(0..3);
            let start = rng.gen_range(0..s[axis]);
            let len = rng.gen_range(1..=s[axis] - start);
            probe(vec![uniform(rng, &s, -2.0, 2.0)], move |t, v| t.slice(v[0], axis, start, len))
        }
        "gather" | "embedding" => {
            let s = dims(rng, 2);
            let rows: Vec<usize> = (0..rng.gen_range(1..=5)).map(|_| rng.gen_range(0..s[0])).collect();
            let emb = name == "embedding";
            probe(vec![uniform(rng, &s, -2.0, 2.0)], move |t, v| {
                if emb {
                    t.embedding(v[0], &rows)
                } else {
                    t.gather(v[0], &rows)
                }
            })
        }
        "pick" => {
            let s = dims(rng, 2);
            let flat: Vec<usize> = (0..rng.gen_range(1..=5)).map(|_| rng.gen_range(0..s[0] * s[1])).collect();
            probe(vec![uniform(rng, &s, -2.0, 2.0)], move |t, v| t.pick(v[0], &flat))
        }
        "sum" => probe(vec![random_input(rng, 2, -2.0, 2.0)], |t, v| t.sum(v[0])),
        "sum_axis" | "log_sum_exp" => {
            let s = dims(rng, 3);
            let axis = rng.gen_range(0..3);
            let lse = name == "log_sum_exp";
            probe(vec![uniform(rng, &s, -3.0, 3.0)], move |t, v| {
                if lse {
                    t.log_sum_exp(v[0], axis)
                } else {
                    t.sum_axis(v[0], axis)
                }
            })
        }
        "exp" => probe(vec![random_input(rng, 2, -2.0, 2.0)], |t, v| t.exp(v[0])),
        "log" => probe(vec![random_input(rng, 2, 0.2, 3.0)], |t, v| t.log(v[0])),
        "tanh" => probe(vec![random_input(rng, 2, -2.0, 2.0)], |t, v| t.tanh(v[0])),
        "sigmoid" => probe(vec![random_input(rng, 2, -4.0, 4.0)], |t, v| t.sigmoid(v[0])),
        "softmax" => {
            let tau = rng.gen_range(0.5..2.0);
            probe(vec![random_input(rng, 3, -3.0, 3.0)], move |t, v| t.softmax(v[0], tau))
        }
        "length_distribution" => {
            let (n, d) = (rng.gen_range(1..=4), rng.gen_range(1..=3));
            probe(vec![uniform(rng, &[n, d + 1], 0.05, 1.0)], |t, v| t.length_distribution(v[0]))
        }
        "marginal_fertility" => {
            let (n, d) = fertility_shape(rng);
            let l = rng.gen_range(1..n * d);
            probe(vec![uniform(rng, &[n, d + 1], 0.05, 1.0)], move |t, v| t.marginal_fertility(v[0], l))
        }
        "expected_permutation" => {
            let l = rng.gen_range(2..=6);
            let s = uniform(rng, &[reordering::num_spans(l), 2], -2.0, 2.0);
            probe(vec![s], move |t, v| t.expected_permutation(v[0], l))
        }
        other => unreachable!("no probe for {other}"),
    }
}

/// Every differentiable operation the tape provides.
pub const OPS: &[&str] = &[
    "add",
    "sub",
    "mul",
    "scale",
    "add_row",
    "matmul",
    "transpose",
    "reshape",
    "concat",
    "slice",
    "gather",
    "embedding",
    "pick",
    "sum",
    "sum_axis",
    "exp",
    "log",
    "tanh",
    "sigmoid",
    "softmax",
    "log_sum_exp",
    "length_distribution",
    "marginal_fertility",
    "expected_permutation",
];

/// Finite-difference check of each operation on `instances` random inputs.
pub fn gradcheck_ops(instances: usize, seed: u64) -> Result<Vec<CheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    for &name in OPS {
        let start = Instant::now();
        let mut worst = 0.0f64;
        for _ in 0..instances {
            let p = op_probes(name, &mut rng);
            worst = worst.max(check_probe(&p, &mut rng)?);
        }
        reports.push(CheckReport::finish(format!("op/{name}"), instances, worst, OP_TOLERANCE, start));
    }
    Ok(reports)
}

/// Loss gradient with respect to fertility probabilities through
/// `Σ mask ⊙ log F̄`, and with respect to span scores through
/// `Σ log(R̄ + ε)`.
pub fn gradcheck_layers(instances: usize, seed: u64) -> Result<Vec<CheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = Instant::now();
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (n, d) = fertility_shape(&mut rng);
        let l = rng.gen_range(1..n * d);
        let mask = uniform(&mut rng, &[n, l, d], 0.0, 1.0).data().iter().map(|&u| if u < 0.5 { 1.0 } else { 0.0 }).collect::<Vec<_>>();
        let mask = Array::new([n, l, d], mask).unwrap();
        let p = probe(vec![uniform(&mut rng, &[n, d + 1], 0.05, 1.0)], move |t, v| {
            let f = t.marginal_fertility(v[0], l)?;
            let eps = t.constant(Array::full([n, l, d], 1e-3));
            let f = t.add(f, eps)?;
            let lf = t.log(f)?;
            let m = t.constant(mask.clone());
            t.mul(lf, m)
        });
        worst = worst.max(check_probe(&p, &mut rng)?);
    }
    let fert = CheckReport::finish("layer/fertility", instances, worst, OP_TOLERANCE, start);

    let start = Instant::now();
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let l = rng.gen_range(1..=6);
        let s = uniform(&mut rng, &[reordering::num_spans(l), 2], -2.0, 2.0);
        let p = probe(vec![s], move |t, v| {
            let r = t.expected_permutation(v[0], l)?;
            let eps = t.constant(Array::full([l, l], 1e-3));
            let r = t.add(r, eps)?;
            t.log(r)
        });
        worst = worst.max(check_probe(&p, &mut rng)?);
    }
    let perm = CheckReport::finish("layer/reordering", instances, worst, OP_TOLERANCE, start);
    Ok(vec![fert, perm])
}

fn tiny_vocab() -> Vocabulary {
    let v = Vocab::from(vec!["a".to_string(), "b".to_string(), "c".to_string()]);
    Vocabulary {
        source: v.clone(),
        target: v,
    }
}

/// A tiny model (every dimension ≤ 8) with weights redrawn from a wider
/// range so that gradients are well away from zero.
pub fn tiny_model(order: Order, decoder: DecoderVariant, seed: u64) -> Result<Model> {
    let cfg = ModelConfig {
        embedding_dim: 4,
        fertility_hidden: 3,
        reorder_hidden: 2,
        decoder_hidden: 2,
        mlp_hidden: 5,
        max_fertility: 2,
        order,
        decoder,
        ..ModelConfig::default()
    };
    let mut model = Model::new(cfg, tiny_vocab(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        for x in model.params.get_mut(id).data_mut() {
            *x = rng.gen_range(-0.5..0.5);
        }
    }
    Ok(model)
}

/// Loss gradient of tiny models with respect to every parameter tensor,
/// for both composition orders and all decoder variants, with guidance
/// active. Tensors are compared as wholes: single entries of order 1e-9
/// sit at the rounding floor of a finite difference through the full
/// network.
pub fn gradcheck_model(seed: u64) -> Result<CheckReport> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = TrainConfig::default();
    let variants = [
        (Order::FertilityFirst, DecoderVariant::Independent),
        (Order::ReorderFirst, DecoderVariant::Independent),
        (Order::FertilityFirst, DecoderVariant::Copy),
        (Order::FertilityFirst, DecoderVariant::Autoregressive),
        (Order::ReorderFirst, DecoderVariant::Autoregressive),
    ];
    let mut worst = 0.0f64;
    let mut cases = 0;
    for (k, &(order, decoder)) in variants.iter().enumerate() {
        let model = tiny_model(order, decoder, seed + k as u64)?;
        let n = rng.gen_range(2..=4);
        let l = rng.gen_range(n.max(2)..=5.min(2 * n));
        let ex = Encoded {
            source: (0..n).map(|_| rng.gen_range(0..3)).collect(),
            target: (0..l).map(|_| rng.gen_range(0..3)).collect(),
            guidance: vec![(0, 0), (n - 1, l - 1)],
        };
        let mut g = Graph::new(&model.params);
        let loss = example_loss(&model, &mut g, &ex, 0, &cfg)?;
        g.tape.backward(loss)?;
        let mut grads = vec![None; model.params.len()];
        for (id, grad) in g.param_grads() {
            grads[id.index()] = Some(grad.data().to_vec());
        }
        drop(g);
        for id in model.params.ids() {
            let base = model.params.get(id).data().to_vec();
            let ad = grads[id.index()].clone().unwrap_or_else(|| vec![0.0; base.len()]);
            let mut probe_model = model.clone();
            let fd = oracle::finite_difference_grad(
                |x| {
                    probe_model.params.get_mut(id).data_mut().copy_from_slice(x);
                    let mut g = Graph::new(&probe_model.params);
                    let loss = example_loss(&probe_model, &mut g, &ex, 0, &cfg).expect("perturbed loss");
                    g.tape.value(loss).data()[0]
                },
                &base,
                FD_STEP,
            );
            worst = worst.max(tensor_relative_error(&ad, &fd));
        }
        cases += 1;
    }
    Ok(CheckReport::finish("model/end-to-end", cases, worst, MODEL_TOLERANCE, start))
}

/// All gradient suites.
pub fn gradcheck_all(instances: usize, seed: u64) -> Result<Vec<CheckReport>> {
    let mut out = gradcheck_ops(instances, seed)?;
    out.push(constant_length_check(instances, seed + 3)?);
    out.extend(gradcheck_layers(instances, seed + 1)?);
    out.push(gradcheck_model(seed + 2)?);
    Ok(out)
}

fn random_table(rng: &mut ChaCha8Rng, n: usize, d: usize) -> FertilityTable {
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let raw: Vec<f64> = (0..=d)
                .map(|_| if rng.gen_bool(0.1) { 0.0 } else { rng.gen_range(0.01..1.0) })
                .collect();
            let total: f64 = raw.iter().sum();
            if total == 0.0 {
                vec![1.0 / (d + 1) as f64; d + 1]
            } else {
                raw.iter().map(|x| x / total).collect()
            }
        })
        .collect();
    FertilityTable::from_rows(&rows).expect("normalized rows")
}

/// Marginal fertilities and length distributions against enumeration for
/// every `n ≤ 5`, `d ≤ 3`, `tables` random tables each, every feasible `l`.
pub fn fertility_oracle_check(tables: usize, seed: u64) -> Result<CheckReport> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut cases = 0;
    for n in 1..=5 {
        for d in 1..=3 {
            for _ in 0..tables {
                let table = random_table(&mut rng, n, d);
                let dist = fertility::length_distribution(&table);
                let exact = oracle::enum_length_distribution(table.probs())?;
                worst = worst.max(dist.iter().zip(&exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
                for l in 1..=n * d {
                    if exact[l] == 0.0 {
                        let infeasible = fertility::marginal_fertility(&table, l);
                        if !matches!(infeasible, Err(Error::InfeasibleLength { .. })) {
                            worst = f64::INFINITY;
                        }
                        continue;
                    }
                    let dp = fertility::marginal_fertility(&table, l)?;
                    let brute = oracle::enum_fertility_marginals(table.probs(), l)?;
                    worst = worst.max(dp.tensor.max_abs_diff(&brute));
                    cases += 1;
                }
            }
        }
    }
    Ok(CheckReport::finish("oracle/fertility", cases, worst, ORACLE_TOLERANCE, start))
}

fn random_scores(rng: &mut ChaCha8Rng, l: usize, scale: f64) -> SpanScores {
    SpanScores::from_fn(l, |_, _, _| rng.gen_range(-scale..scale))
}

/// Expected permutations against tree enumeration for `l ∈ 2..=6`.
pub fn permutation_oracle_check(charts: usize, seed: u64) -> Result<CheckReport> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut cases = 0;
    for l in 2..=6 {
        for _ in 0..charts {
            let scores = random_scores(&mut rng, l, 3.0);
            let dp = reordering::expected_permutation(&scores);
            let score = |i: usize, j: usize, inv: bool| {
                scores.get(i, j, if inv { Orientation::Inverted } else { Orientation::Straight })
            };
            let brute = oracle::enum_tree_expectation(l, &score)?;
            worst = worst.max(dp.matrix.max_abs_diff(&brute));
            cases += 1;
        }
    }
    Ok(CheckReport::finish("oracle/permutation", cases, worst, ORACLE_TOLERANCE, start))
}

/// Row and column sums of `R̄` for lengths up to `max_len`.
pub fn doubly_stochastic_check(max_len: usize, seed: u64) -> Result<CheckReport> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut lengths: Vec<usize> = (1..=12).collect();
    lengths.extend([16, 20, 25, 30, 35, 40]);
    lengths.retain(|&l| l <= max_len);
    for &l in &lengths {
        let r = reordering::expected_permutation(&random_scores(&mut rng, l, 5.0)).matrix;
        for i in 0..l {
            let row: f64 = (0..l).map(|j| r.get(&[i, j])).sum();
            let col: f64 = (0..l).map(|j| r.get(&[j, i])).sum();
            worst = worst.max((row - 1.0).abs()).max((col - 1.0).abs());
        }
    }
    Ok(CheckReport::finish("property/doubly-stochastic", lengths.len(), worst, 1e-6, start))
}

/// A random grammar in Chomsky normal form over `terminals` symbols.
pub fn random_grammar(rng: &mut ChaCha8Rng, terminals: usize) -> CompiledGrammar {
    let k = rng.gen_range(1..=3);
    let mut binary = Vec::new();
    for a in 0..k {
        for b in 0..k {
            for c in 0..k {
                if rng.gen_bool(0.3) {
                    binary.push((a, b, c));
                }
            }
        }
    }
    let mut lexical = Vec::new();
    for a in 0..k {
        for t in 0..terminals {
            if rng.gen_bool(0.5) {
                lexical.push((a, t));
            }
        }
    }
    CompiledGrammar {
        num_nonterminals: k,
        start: 0,
        binary,
        lexical,
    }
}

fn random_distributions(rng: &mut ChaCha8Rng, l: usize, v: usize) -> Array {
    let mut a = uniform(rng, &[l, v], -3.0, 3.0);
    for row in a.data_mut().chunks_mut(v) {
        row.iter_mut().for_each(|x| *x = x.exp());
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= s);
    }
    a
}

/// Viterbi CYK against brute-force grammatical argmax, outputs re-checked
/// by an independent recognizer.
pub fn grammar_oracle_check(instances: usize, seed: u64) -> Result<CheckReport> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let v = rng.gen_range(1..=4);
        let l = rng.gen_range(1..=4);
        let grammar = random_grammar(&mut rng, v);
        let dist = random_distributions(&mut rng, l, v);
        let fast = match viterbi_cyk(&dist, &grammar) {
            Ok(r) => Some(r),
            Err(Error::NoParse(_)) => None,
            Err(e) => return Err(e),
        };
        let brute = oracle::brute_force_grammatical_argmax(&dist, &grammar)?;
        let err = match (&fast, &brute) {
            (None, None) => 0.0,
            (Some((w, s)), Some((bw, bs))) => {
                if w != bw || !oracle::derives(&grammar, w) {
                    f64::INFINITY
                } else {
                    (s - bs).abs()
                }
            }
            _ => f64::INFINITY,
        };
        worst = worst.max(err);
    }
    Ok(CheckReport::finish("oracle/viterbi-cyk", instances, worst, ORACLE_TOLERANCE, start))
}

/// `Σ_l P(l | x) = 1` on random fertility tables and random models.
pub fn length_normalization_check(cases: usize, seed: u64) -> Result<CheckReport> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for c in 0..cases {
        let (n, d) = (rng.gen_range(1..=12), rng.gen_range(1..=5));
        let total: f64 = fertility::length_distribution(&random_table(&mut rng, n, d)).iter().sum();
        worst = worst.max((total - 1.0).abs());

        let order = if c % 2 == 0 { Order::FertilityFirst } else { Order::ReorderFirst };
        let model = tiny_model(order, DecoderVariant::Independent, seed + c as u64)?;
        let ids: Vec<usize> = (0..rng.gen_range(1..=10)).map(|_| rng.gen_range(0..3)).collect();
        let mut g = Graph::new(&model.params);
        let prep = model.prepare(&mut g, &ids)?;
        let total: f64 = g.tape.value(prep.length_dist).data().iter().sum();
        worst = worst.max((total - 1.0).abs());
    }
    Ok(CheckReport::finish("property/length-normalization", 2 * cases, worst, ORACLE_TOLERANCE, start))
}

/// All DP-versus-enumeration suites.
pub fn oracle_check_all(seed: u64) -> Result<Vec<CheckReport>> {
    Ok(vec![
        fertility_oracle_check(20, seed)?,
        permutation_oracle_check(20, seed + 1)?,
        doubly_stochastic_check(40, seed + 2)?,
        grammar_oracle_check(100, seed + 3)?,
        length_normalization_check(20, seed + 4)?,
    ])
}
