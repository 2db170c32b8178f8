//! Expected permutation matrices over separable permutations.
//!
//! A permutation tree over `l` leaves has internal nodes labelled straight
//! (children concatenated in order) or inverted (children concatenated in
//! reverse). Each span `[i, j)` of width at least two carries one score per
//! label, and a tree's probability is proportional to the exponentiated sum
//! of the scores of its nodes.
//!
//! Given that span `[i, j)` is a constituent with split `k` and label `o`,
//! the sub-permutations of `[i, k)` and `[k, j)` are independent, so the
//! expected permutation of a span is the posterior mixture over `(k, o)` of
//! its children's expected permutations placed side by side (straight) or
//! swapped (inverted). Rows index source positions, columns target positions.

use crate::error::{Error, Result};
use crate::tensor::{log_sum_exp, Array};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Orientation {
    Straight = 0,
    Inverted = 1,
}

impl Orientation {
    pub const BOTH: [Orientation; 2] = [Orientation::Straight, Orientation::Inverted];
}

/// Number of spans of width ≥ 2 over `l` leaves.
pub fn num_spans(l: usize) -> usize {
    l * l.saturating_sub(1) / 2
}

/// Canonical span order: by width, then by start.
pub fn span_index(l: usize, i: usize, j: usize) -> usize {
    debug_assert!(j >= i + 2 && j <= l);
    let w = j - i;
    // Σ_{w'=2}^{w-1} (l - w' + 1)
    let before = (w - 2) * (2 * l + 1 - w) / 2;
    before + i
}

/// Inverse of [`span_index`].
pub fn spans(l: usize) -> impl Iterator<Item = (usize, usize)> {
    (2..=l).flat_map(move |w| (0..=l - w).map(move |i| (i, i + w)))
}

/// Real-valued straight/inverted scores for every span of width ≥ 2,
/// stored as a `[num_spans(l), 2]` array in [`span_index`] order.
#[derive(Clone, Debug)]
pub struct SpanScores {
    len: usize,
    scores: Array,
}

impl SpanScores {
    pub fn new(len: usize, scores: Array) -> Result<Self> {
        if len == 0 {
            return Err(Error::domain("span_scores", "length must be >= 1"));
        }
        if scores.shape() != [num_spans(len), 2] {
            return Err(Error::shape("span_scores", &[scores.shape(), &[num_spans(len), 2]]));
        }
        Ok(SpanScores { len, scores })
    }

    pub fn zeros(len: usize) -> Self {
        SpanScores {
            len,
            scores: Array::zeros([num_spans(len), 2]),
        }
    }

    pub fn from_fn(len: usize, mut f: impl FnMut(usize, usize, Orientation) -> f64) -> Self {
        let mut s = Self::zeros(len);
        for (i, j) in spans(len) {
            for o in Orientation::BOTH {
                s.set(i, j, o, f(i, j, o));
            }
        }
        s
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn get(&self, i: usize, j: usize, o: Orientation) -> f64 {
        self.scores.data()[span_index(self.len, i, j) * 2 + o as usize]
    }

    pub fn set(&mut self, i: usize, j: usize, o: Orientation, v: f64) {
        let idx = span_index(self.len, i, j) * 2 + o as usize;
        self.scores.data_mut()[idx] = v;
    }

    pub fn array(&self) -> &Array {
        &self.scores
    }
}

/// Log partition functions of every span; leaves are 0.
#[derive(Clone, Debug)]
pub struct InsideChart {
    len: usize,
    log_z: Vec<f64>,
}

impl InsideChart {
    pub fn log_z(&self, i: usize, j: usize) -> f64 {
        self.log_z[i * (self.len + 1) + j]
    }

    pub fn root(&self) -> f64 {
        self.log_z(0, self.len)
    }
}

/// `q(k, o | i, j)`: posterior over the split point and label of span
/// `[i, j)` given that it is a constituent.
#[derive(Clone, Debug)]
pub struct SplitPosteriors {
    len: usize,
    q: Vec<f64>,
    offsets: Vec<usize>,
}

impl SplitPosteriors {
    pub fn get(&self, i: usize, j: usize, k: usize, o: Orientation) -> f64 {
        assert!(i < k && k < j);
        let base = self.offsets[span_index(self.len, i, j)];
        self.q[base + (k - i - 1) * 2 + o as usize]
    }
}

/// Doubly stochastic `l × l` matrix; `[a][b]` is the probability that
/// source position `a` lands at target position `b`.
#[derive(Clone, Debug)]
pub struct MarginalPermutation {
    pub matrix: Array,
}

pub fn inside(scores: &SpanScores) -> InsideChart {
    let l = scores.len;
    let cache = PermutationCache::forward(l, scores.scores.data(), false);
    InsideChart {
        len: l,
        log_z: cache.log_z,
    }
}

pub fn split_posteriors(scores: &SpanScores, chart: &InsideChart) -> SplitPosteriors {
    let l = scores.len;
    let offsets = split_offsets(l);
    let mut q = vec![0.0; *offsets.last().unwrap_or(&0) + last_span_splits(l)];
    for (i, j) in spans(l) {
        let span = span_index(l, i, j);
        for k in i + 1..j {
            for o in Orientation::BOTH {
                let t = scores.get(i, j, o) + chart.log_z(i, k) + chart.log_z(k, j);
                q[offsets[span] + (k - i - 1) * 2 + o as usize] = (t - chart.log_z(i, j)).exp();
            }
        }
    }
    SplitPosteriors { len: l, q, offsets }
}

pub fn expected_permutation(scores: &SpanScores) -> MarginalPermutation {
    let l = scores.len;
    let cache = PermutationCache::forward(l, scores.scores.data(), true);
    MarginalPermutation {
        matrix: Array::new([l, l], cache.root_matrix()).unwrap(),
    }
}

fn last_span_splits(l: usize) -> usize {
    if l >= 2 {
        2 * (l - 1)
    } else {
        0
    }
}

fn split_offsets(l: usize) -> Vec<usize> {
    let mut offsets = Vec::with_capacity(num_spans(l));
    let mut acc = 0;
    for (i, j) in spans(l) {
        offsets.push(acc);
        acc += 2 * (j - i - 1);
    }
    offsets
}

const LEAF: [f64; 1] = [1.0];

/// Forward quantities kept for the backward pass.
#[derive(Clone, Debug)]
pub(crate) struct PermutationCache {
    len: usize,
    log_z: Vec<f64>,
    q: Vec<f64>,
    q_offsets: Vec<usize>,
    mats: Vec<Vec<f64>>,
}

impl PermutationCache {
    pub(crate) fn forward(l: usize, scores: &[f64], with_matrices: bool) -> Self {
        let stride = l + 1;
        let mut log_z = vec![f64::NEG_INFINITY; stride * stride];
        for i in 0..l {
            log_z[i * stride + i + 1] = 0.0;
        }
        let q_offsets = split_offsets(l);
        let mut q = vec![0.0; q_offsets.last().copied().unwrap_or(0) + last_span_splits(l)];
        let mut terms = Vec::with_capacity(2 * l);
        for (i, j) in spans(l) {
            let span = span_index(l, i, j);
            terms.clear();
            for k in i + 1..j {
                let children = log_z[i * stride + k] + log_z[k * stride + j];
                terms.push(scores[span * 2] + children);
                terms.push(scores[span * 2 + 1] + children);
            }
            let z = log_sum_exp(&terms);
            log_z[i * stride + j] = z;
            let base = q_offsets[span];
            for (slot, t) in q[base..base + terms.len()].iter_mut().zip(&terms) {
                *slot = (t - z).exp();
            }
        }
        let mut cache = PermutationCache {
            len: l,
            log_z,
            q,
            q_offsets,
            mats: Vec::new(),
        };
        if with_matrices {
            cache.fill_matrices();
        }
        cache
    }

    fn mat(&self, i: usize, j: usize) -> &[f64] {
        if j - i == 1 {
            &LEAF
        } else {
            &self.mats[span_index(self.len, i, j)]
        }
    }

    fn fill_matrices(&mut self) {
        let l = self.len;
        self.mats = vec![Vec::new(); num_spans(l)];
        for (i, j) in spans(l) {
            let w = j - i;
            let span = span_index(l, i, j);
            let mut m = vec![0.0; w * w];
            for k in i + 1..j {
                let (a, b) = (k - i, j - k);
                let base = self.q_offsets[span] + (k - i - 1) * 2;
                let (qs, qi) = (self.q[base], self.q[base + 1]);
                let left = self.mat(i, k);
                let right = self.mat(k, j);
                // straight: left → (0, 0), right → (a, a)
                // inverted: left → (0, b), right → (a, 0)
                block_axpy(&mut m, w, 0, 0, left, a, qs);
                block_axpy(&mut m, w, a, a, right, b, qs);
                block_axpy(&mut m, w, 0, b, left, a, qi);
                block_axpy(&mut m, w, a, 0, right, b, qi);
            }
            self.mats[span] = m;
        }
    }

    pub(crate) fn root_matrix(&self) -> Vec<f64> {
        self.mat(0, self.len).to_vec()
    }

    /// Gradient of `<grad_out, R̄>` with respect to the `[num_spans, 2]`
    /// score buffer.
    pub(crate) fn backward(&self, grad_out: &[f64]) -> Vec<f64> {
        let l = self.len;
        let stride = l + 1;
        let mut grad_s = vec![0.0; num_spans(l) * 2];
        if l < 2 {
            return grad_s;
        }
        let mut gmats: Vec<Vec<f64>> = spans(l).map(|(i, j)| vec![0.0; (j - i) * (j - i)]).collect();
        gmats[span_index(l, 0, l)].copy_from_slice(grad_out);
        let mut gz = vec![0.0; stride * stride];
        let mut gq = Vec::with_capacity(2 * l);
        for w in (2..=l).rev() {
            for i in 0..=l - w {
                let j = i + w;
                let span = span_index(l, i, j);
                let g = std::mem::take(&mut gmats[span]);
                let base = self.q_offsets[span];
                gq.clear();
                for k in i + 1..j {
                    let (a, b) = (k - i, j - k);
                    let qb = base + (k - i - 1) * 2;
                    let (qs, qi) = (self.q[qb], self.q[qb + 1]);
                    let left = self.mat(i, k);
                    let right = self.mat(k, j);
                    gq.push(block_dot(&g, w, 0, 0, left, a) + block_dot(&g, w, a, a, right, b));
                    gq.push(block_dot(&g, w, 0, b, left, a) + block_dot(&g, w, a, 0, right, b));
                    if a >= 2 {
                        let gl = &mut gmats[span_index(l, i, k)];
                        block_extract(gl, &g, w, 0, 0, a, qs);
                        block_extract(gl, &g, w, 0, b, a, qi);
                    }
                    if b >= 2 {
                        let gr = &mut gmats[span_index(l, k, j)];
                        block_extract(gr, &g, w, a, a, b, qs);
                        block_extract(gr, &g, w, a, 0, b, qi);
                    }
                }
                let qs = &self.q[base..base + gq.len()];
                let gz_total = gz[i * stride + j] - gq.iter().zip(qs).map(|(g, q)| g * q).sum::<f64>();
                for k in i + 1..j {
                    for o in 0..2 {
                        let t = (k - i - 1) * 2 + o;
                        let gt = qs[t] * (gq[t] + gz_total);
                        grad_s[span * 2 + o] += gt;
                        gz[i * stride + k] += gt;
                        gz[k * stride + j] += gt;
                    }
                }
            }
        }
        grad_s
    }
}

/// `dst[r0.., c0..] += alpha · src` for a `size × size` block of a
/// `w × w` destination.
fn block_axpy(dst: &mut [f64], w: usize, r0: usize, c0: usize, src: &[f64], size: usize, alpha: f64) {
    if alpha == 0.0 {
        return;
    }
    for r in 0..size {
        let d = &mut dst[(r0 + r) * w + c0..(r0 + r) * w + c0 + size];
        for (x, s) in d.iter_mut().zip(&src[r * size..(r + 1) * size]) {
            *x += alpha * s;
        }
    }
}

fn block_dot(g: &[f64], w: usize, r0: usize, c0: usize, src: &[f64], size: usize) -> f64 {
    let mut acc = 0.0;
    for r in 0..size {
        let row = &g[(r0 + r) * w + c0..(r0 + r) * w + c0 + size];
        acc += row.iter().zip(&src[r * size..(r + 1) * size]).map(|(a, b)| a * b).sum::<f64>();
    }
    acc
}

/// `dst += alpha · g[r0.., c0..]` for a `size × size` block.
fn block_extract(dst: &mut [f64], g: &[f64], w: usize, r0: usize, c0: usize, size: usize, alpha: f64) {
    for r in 0..size {
        let row = &g[(r0 + r) * w + c0..(r0 + r) * w + c0 + size];
        for (x, v) in dst[r * size..(r + 1) * size].iter_mut().zip(row) {
            *x += alpha * v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn span_index_is_dense() {
        for l in 1..8 {
            let idx: Vec<_> = spans(l).map(|(i, j)| span_index(l, i, j)).collect();
            assert_eq!(idx, (0..num_spans(l)).collect::<Vec<_>>());
        }
    }

    #[test]
    fn inside_small_cases() {
        assert_eq!(inside(&SpanScores::zeros(1)).root(), 0.0);
        assert!((inside(&SpanScores::zeros(2)).root() - 2f64.ln()).abs() < 1e-15);
        // two shapes × two labels × two labels
        assert!((inside(&SpanScores::zeros(3)).root() - 8f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn uniform_split_posteriors() {
        let s = SpanScores::zeros(2);
        let q = split_posteriors(&s, &inside(&s));
        assert!((q.get(0, 2, 1, Orientation::Straight) - 0.5).abs() < 1e-15);
        assert!((q.get(0, 2, 1, Orientation::Inverted) - 0.5).abs() < 1e-15);

        let s = SpanScores::zeros(3);
        let q = split_posteriors(&s, &inside(&s));
        for k in 1..3 {
            for o in Orientation::BOTH {
                assert!((q.get(0, 3, k, o) - 0.25).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn uniform_pair_is_half() {
        let r = expected_permutation(&SpanScores::zeros(2));
        for v in r.matrix.data() {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn single_leaf_is_identity() {
        let r = expected_permutation(&SpanScores::zeros(1));
        assert_eq!(r.matrix.data(), &[1.0]);
    }

    #[test]
    fn strong_straight_gives_identity() {
        let s = SpanScores::from_fn(7, |_, _, o| if o == Orientation::Straight { 40.0 } else { 0.0 });
        let r = expected_permutation(&s);
        for a in 0..7 {
            for b in 0..7 {
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((r.matrix.get(&[a, b]) - want).abs() <= 1e-9);
            }
        }
    }
}
