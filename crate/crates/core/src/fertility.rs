//! Length distributions and expected copy alignments from per-token
//! fertility distributions.
//!
//! Given independent categorical fertilities `P(f_i = r)`, `r ∈ 0..=d`,
//! the forward table holds `P(f_0 + … + f_i = h)` and the backward table
//! `P(f_i + … + f_{n+1} = h)`, with dummy tokens `f_0 = f_{n+1} = 0`.
//! Intermediate position `j` is the `u`-th copy of input `i` exactly when
//! the tokens before `i` produce `j - u` copies, `f_i = u + v` for some
//! `v ≥ 0`, and the tokens after `i` produce `l - j - v`. Summing over `v`
//! and dividing by `P(total = l)` gives the marginal tensor.
//!
//! Everything runs in the probability domain; see [`UNDERFLOW_GUARD`].

use crate::error::{Error, Result};
use crate::tensor::Array;

/// Normalizers below this are rejected instead of producing garbage.
pub const UNDERFLOW_GUARD: f64 = 1e-280;

const ROW_TOLERANCE: f64 = 1e-9;

/// Per-token fertility distributions, `n × (d + 1)`, rows summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct FertilityTable {
    probs: Array,
}

impl FertilityTable {
    pub fn new(probs: Array) -> Result<Self> {
        let (n, cols) = probs
            .dims2()
            .ok_or_else(|| Error::shape("fertility_table", &[probs.shape()]))?;
        if cols < 2 {
            return Err(Error::domain("fertility_table", "max fertility d must be >= 1"));
        }
        for i in 0..n {
            let row = probs.row_slice(i);
            if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
                return Err(Error::domain(
                    "fertility_table",
                    format!("row {i} has a negative or non-finite entry"),
                ));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > ROW_TOLERANCE {
                return Err(Error::domain(
                    "fertility_table",
                    format!("row {i} sums to {s}"),
                ));
            }
        }
        Ok(FertilityTable { probs })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(Array::from_rows(rows)?)
    }

    pub fn n(&self) -> usize {
        self.probs.shape()[0]
    }

    pub fn max_fertility(&self) -> usize {
        self.probs.shape()[1] - 1
    }

    pub fn probs(&self) -> &Array {
        &self.probs
    }

    pub fn max_length(&self) -> usize {
        self.n() * self.max_fertility()
    }
}

/// Forward and backward partial-sum distributions, both
/// `(n + 2) × (n·d + 1)`.
#[derive(Clone, Debug)]
pub struct LengthTables {
    pub forward: Array,
    pub backward: Array,
}

impl LengthTables {
    /// `P(total = l)` for every `l ∈ 0..=n·d`.
    pub fn totals(&self) -> &[f64] {
        let rows = self.forward.shape()[0];
        self.forward.row_slice(rows - 1)
    }
}

/// Expected alignment tensor `n × l × d`; entry `[i][j][u-1]` is the
/// probability that intermediate token `j` is the `u`-th copy of input `i`
/// given total length `l`.
#[derive(Clone, Debug)]
pub struct MarginalFertility {
    pub tensor: Array,
    pub length: usize,
}

impl MarginalFertility {
    pub fn n(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn max_fertility(&self) -> usize {
        self.tensor.shape()[2]
    }

    /// `E[f_i | total = l]` per input token.
    pub fn expected_fertilities(&self) -> Vec<f64> {
        let per_input = self.length * self.max_fertility();
        self.tensor
            .data()
            .chunks(per_input.max(1))
            .take(self.n())
            .map(|c| c.iter().sum())
            .collect()
    }
}

pub fn length_tables(ft: &FertilityTable) -> LengthTables {
    let (n, d) = (ft.n(), ft.max_fertility());
    let p = ft.probs.data();
    let width = n * d + 1;
    LengthTables {
        forward: Array::new([n + 2, width], forward_table(p, n, d)).unwrap(),
        backward: Array::new([n + 2, width], backward_table(p, n, d)).unwrap(),
    }
}

pub fn length_distribution(ft: &FertilityTable) -> Vec<f64> {
    let (n, d) = (ft.n(), ft.max_fertility());
    let alpha = forward_table(ft.probs.data(), n, d);
    let width = n * d + 1;
    alpha[(n + 1) * width..].to_vec()
}

pub fn marginal_fertility(ft: &FertilityTable, length: usize) -> Result<MarginalFertility> {
    marginal_fertility_counted(ft, length).map(|(m, _)| m)
}

/// Like [`marginal_fertility`], also returning the number of inner
/// multiply-adds spent on the marginal sums.
pub fn marginal_fertility_counted(
    ft: &FertilityTable,
    length: usize,
) -> Result<(MarginalFertility, u64)> {
    let (n, d) = (ft.n(), ft.max_fertility());
    let mut ops = 0;
    let tensor = marginal_forward(ft.probs.data(), n, d, length, &mut ops)?;
    Ok((
        MarginalFertility {
            tensor: Array::new([n, length, d], tensor).unwrap(),
            length,
        },
        ops,
    ))
}

// Raw kernels on flat `n × (d+1)` probability buffers. Rows need not be
// normalized here; the autodiff layer perturbs entries freely.

pub(crate) fn forward_table(p: &[f64], n: usize, d: usize) -> Vec<f64> {
    let width = n * d + 1;
    let mut alpha = vec![0.0; (n + 2) * width];
    alpha[0] = 1.0;
    for i in 1..=n {
        let pi = &p[(i - 1) * (d + 1)..i * (d + 1)];
        let reach = (i - 1) * d;
        let (prev, cur) = alpha.split_at_mut(i * width);
        let prev = &prev[(i - 1) * width..];
        let cur = &mut cur[..width];
        for h0 in 0..=reach {
            let a = prev[h0];
            if a == 0.0 {
                continue;
            }
            for (r, &pr) in pi.iter().enumerate() {
                cur[h0 + r] += pr * a;
            }
        }
    }
    alpha.copy_within(n * width..(n + 1) * width, (n + 1) * width);
    alpha
}

pub(crate) fn backward_table(p: &[f64], n: usize, d: usize) -> Vec<f64> {
    let width = n * d + 1;
    let mut beta = vec![0.0; (n + 2) * width];
    beta[(n + 1) * width] = 1.0;
    for i in (1..=n).rev() {
        let pi = &p[(i - 1) * (d + 1)..i * (d + 1)];
        let reach = (n - i) * d;
        let (cur, next) = beta.split_at_mut((i + 1) * width);
        let cur = &mut cur[i * width..];
        let next = &next[..width];
        for h0 in 0..=reach {
            let b = next[h0];
            if b == 0.0 {
                continue;
            }
            for (r, &pr) in pi.iter().enumerate() {
                cur[h0 + r] += pr * b;
            }
        }
    }
    beta.copy_within(width..2 * width, 0);
    beta
}

fn support(totals: &[f64]) -> Vec<usize> {
    totals
        .iter()
        .enumerate()
        .filter(|(_, &p)| p > 0.0)
        .map(|(h, _)| h)
        .collect()
}

fn check_length(alpha: &[f64], n: usize, d: usize, length: usize) -> Result<f64> {
    let width = n * d + 1;
    let totals = &alpha[(n + 1) * width..];
    if length == 0 || length > n * d || totals[length] <= 0.0 {
        return Err(Error::InfeasibleLength {
            length,
            support: support(totals),
        });
    }
    let z = totals[length];
    if z < UNDERFLOW_GUARD {
        return Err(Error::Underflow {
            length,
            normalizer: z,
        });
    }
    Ok(z)
}

pub(crate) fn marginal_forward(
    p: &[f64],
    n: usize,
    d: usize,
    length: usize,
    ops: &mut u64,
) -> Result<Vec<f64>> {
    let width = n * d + 1;
    let alpha = forward_table(p, n, d);
    let z = check_length(&alpha, n, d, length)?;
    let beta = backward_table(p, n, d);
    let l = length;
    let mut out = vec![0.0; n * l * d];
    for i in 1..=n {
        let pi = &p[(i - 1) * (d + 1)..i * (d + 1)];
        let a_row = &alpha[(i - 1) * width..i * width];
        let b_row = &beta[(i + 1) * width..(i + 2) * width];
        for u in 1..=d {
            for j in u..=l {
                let a = a_row[j - u];
                if a == 0.0 {
                    continue;
                }
                let mut acc = 0.0;
                for v in 0..=(l - j).min(d - u) {
                    acc += pi[u + v] * b_row[l - j - v];
                    *ops += 1;
                }
                out[((i - 1) * l + (j - 1)) * d + (u - 1)] = a * acc / z;
            }
        }
    }
    Ok(out)
}

/// Adjoint of the forward recursion: given adjoints on every row of the
/// forward table, accumulate into `grad_p`.
fn forward_table_vjp(p: &[f64], n: usize, d: usize, alpha: &[f64], ga: &mut [f64], grad_p: &mut [f64]) {
    let width = n * d + 1;
    for i in (1..=n).rev() {
        let reach = (i - 1) * d;
        for h0 in 0..=reach {
            let a = alpha[(i - 1) * width + h0];
            let mut back = 0.0;
            for r in 0..=d {
                let g = ga[i * width + h0 + r];
                back += p[(i - 1) * (d + 1) + r] * g;
                grad_p[(i - 1) * (d + 1) + r] += a * g;
            }
            ga[(i - 1) * width + h0] += back;
        }
    }
}

fn backward_table_vjp(p: &[f64], n: usize, d: usize, beta: &[f64], gb: &mut [f64], grad_p: &mut [f64]) {
    let width = n * d + 1;
    for i in 1..=n {
        let reach = (n - i) * d;
        for h0 in 0..=reach {
            let b = beta[(i + 1) * width + h0];
            let mut back = 0.0;
            for r in 0..=d {
                let g = gb[i * width + h0 + r];
                back += p[(i - 1) * (d + 1) + r] * g;
                grad_p[(i - 1) * (d + 1) + r] += b * g;
            }
            gb[(i + 1) * width + h0] += back;
        }
    }
}

/// Vector-Jacobian product of the length distribution (`n·d + 1` entries).
pub(crate) fn length_distribution_vjp(p: &[f64], n: usize, d: usize, grad_out: &[f64], grad_p: &mut [f64]) {
    let width = n * d + 1;
    let alpha = forward_table(p, n, d);
    let mut ga = vec![0.0; (n + 2) * width];
    ga[n * width..(n + 1) * width].copy_from_slice(grad_out);
    forward_table_vjp(p, n, d, &alpha, &mut ga, grad_p);
}

/// Vector-Jacobian product of [`marginal_forward`].
pub(crate) fn marginal_vjp(
    p: &[f64],
    n: usize,
    d: usize,
    length: usize,
    out: &[f64],
    grad_out: &[f64],
    grad_p: &mut [f64],
) {
    let width = n * d + 1;
    let l = length;
    let alpha = forward_table(p, n, d);
    let beta = backward_table(p, n, d);
    let z = alpha[n * width + l];
    let mut ga = vec![0.0; (n + 2) * width];
    let mut gb = vec![0.0; (n + 2) * width];

    let gz: f64 = -grad_out.iter().zip(out).map(|(g, f)| g * f).sum::<f64>() / z;
    for i in 1..=n {
        let row = (i - 1) * (d + 1);
        for u in 1..=d {
            for j in u..=l {
                let idx = ((i - 1) * l + (j - 1)) * d + (u - 1);
                let gn = grad_out[idx] / z;
                if gn == 0.0 {
                    continue;
                }
                let a = alpha[(i - 1) * width + j - u];
                let mut ga_acc = 0.0;
                for v in 0..=(l - j).min(d - u) {
                    let pv = p[row + u + v];
                    let b = beta[(i + 1) * width + l - j - v];
                    ga_acc += pv * b;
                    grad_p[row + u + v] += gn * a * b;
                    gb[(i + 1) * width + l - j - v] += gn * a * pv;
                }
                ga[(i - 1) * width + j - u] += gn * ga_acc;
            }
        }
    }
    ga[n * width + l] += gz;
    forward_table_vjp(p, n, d, &alpha, &mut ga, grad_p);
    backward_table_vjp(p, n, d, &beta, &mut gb, grad_p);
}
