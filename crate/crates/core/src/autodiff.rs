//! Define-by-run reverse-mode differentiation over dense arrays.
//!
//! A [`Tape`] records every operation as a node, in creation order, so the
//! node index is already a topological order. [`Tape::backward`] sweeps it
//! in reverse. Leaf gradients accumulate across calls to `backward` until
//! [`Tape::zero_grad`]; intermediate adjoints are discarded after each
//! sweep.
//!
//! A tape is meant to be rebuilt for every training example.

use crate::error::{Error, Result};
use crate::fertility;
use crate::reordering::{self, PermutationCache};
use crate::tensor::Array;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { src: Var, axis: usize, start: usize },
    Gather { src: Var, rows: Vec<usize> },
    Pick { src: Var, flat: Vec<usize> },
    Sum(Var),
    SumAxis { src: Var, axis: usize },
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softmax { src: Var, temperature: f64 },
    LogSumExp { src: Var, axis: usize },
    LengthDistribution { probs: Var, n: usize, d: usize },
    MarginalFertility { probs: Var, n: usize, d: usize, length: usize },
    ExpectedPermutation { scores: Var, cache: Box<PermutationCache> },
}

#[derive(Debug)]
struct Node {
    value: Array,
    op: Op,
    requires_grad: bool,
}

/// Split a shape around `axis` into (outer, extent, inner) products.
fn around(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Array>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf, or `None` if nothing reached it.
    pub fn grad(&self, v: Var) -> Option<&Array> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// A trainable leaf.
    pub fn var(&mut self, value: Array) -> Var {
        self.leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Array) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Array, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Array, op: Op, parents: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, &[self.shape(a), self.shape(b)]));
        }
        Ok(())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Array {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Array::new(x.shape(), data).unwrap()
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Array {
        let x = self.value(a);
        Array::new(x.shape(), x.data().iter().map(|&v| f(v)).collect()).unwrap()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip(a, b, |p, q| p + q);
        self.push("add", v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip(a, b, |p, q| p - q);
        self.push("sub", v, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip(a, b, |p, q| p * q);
        self.push("mul", v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.map(a, |x| x * c);
        self.push("scale", v, Op::Scale(a, c), &[a])
    }

    /// `[m, n] + [1, n]`, broadcasting the row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self
            .value(a)
            .dims2()
            .ok_or_else(|| Error::shape("add_row", &[self.shape(a), self.shape(row)]))?;
        if self.shape(row) != [1, n] {
            return Err(Error::shape("add_row", &[self.shape(a), self.shape(row)]));
        }
        let r = self.value(row).data();
        let mut out = self.value(a).clone();
        for i in 0..m {
            for (x, y) in out.data_mut()[i * n..(i + 1) * n].iter_mut().zip(r) {
                *x += y;
            }
        }
        self.push("add_row", out, Op::AddRow(a, row), &[a, row])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let dims = (self.value(a).dims2(), self.value(b).dims2());
        let ((m, k), (k2, n)) = match dims {
            (Some(x), Some(y)) if x.1 == y.0 => (x, y),
            _ => return Err(Error::shape("matmul", &[self.shape(a), self.shape(b)])),
        };
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), (k as isize, 1), self.value(b).data(), (n as isize, 1), &mut out);
        debug_assert_eq!(k, k2);
        let out = Array::new([m, n], out).unwrap();
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape("transpose", &[&shape]));
        }
        let r = shape.len();
        let (p, q) = (shape[r - 2], shape[r - 1]);
        let batch = shape[..r - 2].iter().product::<usize>();
        let src = self.value(a).data();
        let mut out = vec![0.0; src.len()];
        transpose_into(src, &mut out, batch, p, q);
        let mut new_shape = shape.clone();
        new_shape.swap(r - 2, r - 1);
        let out = Array::new(new_shape, out).unwrap();
        self.push("transpose", out, Op::Transpose(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshaped(shape)?;
        self.push("reshape", v, Op::Reshape(a), &[a])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::domain("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", &[&base]));
        }
        let mut extent = 0;
        for p in parts {
            let s = self.shape(*p);
            let ok = s.len() == base.len()
                && s.iter().enumerate().all(|(ax, &e)| ax == axis || e == base[ax]);
            if !ok {
                let shapes: Vec<&[usize]> = parts.iter().map(|p| self.shape(*p)).collect();
                return Err(Error::shape("concat", &shapes));
            }
            extent += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = extent;
        let (outer, _, inner) = around(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let (_, e, _) = around(self.shape(*p), axis);
                let chunk = e * inner;
                out.extend_from_slice(&self.value(*p).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let out = Array::new(shape, out).unwrap();
        self.push("concat", out, Op::Concat { parts: parts.to_vec(), axis }, parts)
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape("slice", &[&shape, &[axis, start, len]]));
        }
        let (outer, e, inner) = around(&shape, axis);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * e * inner + start * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let out = Array::new(new_shape, out).unwrap();
        self.push("slice", out, Op::Slice { src: a, axis, start }, &[a])
    }

    /// Rows of a rank-2 array, in the given order (repeats allowed).
    pub fn gather(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self
            .value(a)
            .dims2()
            .ok_or_else(|| Error::shape("gather", &[self.shape(a)]))?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(Error::shape("gather", &[self.shape(a), &[bad]]));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            out.extend_from_slice(&src[r * n..(r + 1) * n]);
        }
        let out = Array::new([rows.len(), n], out).unwrap();
        self.push("gather", out, Op::Gather { src: a, rows: rows.to_vec() }, &[a])
    }

    /// Embedding lookup: rows of `table` for each token id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather(table, ids)
    }

    /// Individual entries by flat (row-major) offset, as a vector.
    pub fn pick(&mut self, a: Var, flat: &[usize]) -> Result<Var> {
        let src = self.value(a).data();
        if let Some(&bad) = flat.iter().find(|&&f| f >= src.len()) {
            return Err(Error::shape("pick", &[self.shape(a), &[bad]]));
        }
        let out = Array::vector(flat.iter().map(|&f| src[f]).collect());
        self.push("pick", out, Op::Pick { src: a, flat: flat.to_vec() }, &[a])
    }

    /// Sum of all entries, as a rank-0 array.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Array::scalar(self.value(a).sum());
        self.push("sum", v, Op::Sum(a), &[a])
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("sum_axis", &[&shape]));
        }
        let (outer, e, inner) = around(&shape, axis);
        let src = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..e {
                let row = &src[(o * e + k) * inner..(o * e + k + 1) * inner];
                for (x, y) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *x += y;
                }
            }
        }
        let mut new_shape = shape;
        new_shape.remove(axis);
        let out = Array::new(new_shape, out).unwrap();
        self.push("sum_axis", out, Op::SumAxis { src: a, axis }, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.map(a, f64::exp);
        self.push("exp", v, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let v = self.map(a, f64::ln);
        self.push("log", v, Op::Log(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let v = self.map(a, f64::tanh);
        self.push("tanh", v, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.map(a, sigmoid);
        self.push("sigmoid", v, Op::Sigmoid(a), &[a])
    }

    /// `softmax(z / temperature)` over the last axis.
    pub fn softmax(&mut self, a: Var, temperature: f64) -> Result<Var> {
        if !(temperature > 0.0) {
            return Err(Error::domain("softmax", format!("temperature {temperature} must be > 0")));
        }
        let shape = self.shape(a).to_vec();
        let last = *shape.last().ok_or_else(|| Error::shape("softmax", &[&shape]))?;
        let mut out = self.value(a).clone();
        if last > 0 {
            for row in out.data_mut().chunks_mut(last) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for x in row.iter_mut() {
                    *x = ((*x - max) / temperature).exp();
                    total += *x;
                }
                row.iter_mut().for_each(|x| *x /= total);
            }
        }
        self.push("softmax", out, Op::Softmax { src: a, temperature }, &[a])
    }

    /// `log Σ exp` over `axis`, removing it.
    pub fn log_sum_exp(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::shape("log_sum_exp", &[&shape]));
        }
        let (outer, e, inner) = around(&shape, axis);
        let src = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for c in 0..inner {
                let at = |k: usize| src[(o * e + k) * inner + c];
                let max = (0..e).map(at).fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = (0..e).map(|k| (at(k) - max).exp()).sum();
                out[o * inner + c] = max + s.ln();
            }
        }
        let mut new_shape = shape;
        new_shape.remove(axis);
        let out = Array::new(new_shape, out).unwrap();
        self.push("log_sum_exp", out, Op::LogSumExp { src: a, axis }, &[a])
    }

    /// Length distribution `P(total = h)`, `h ∈ 0..=n·d`, from an
    /// `n × (d + 1)` fertility table.
    pub fn length_distribution(&mut self, probs: Var) -> Result<Var> {
        let (n, d) = self.fertility_dims("length_distribution", probs)?;
        let alpha = fertility::forward_table(self.value(probs).data(), n, d);
        let width = n * d + 1;
        let out = Array::vector(alpha[(n + 1) * width..].to_vec());
        self.push("length_distribution", out, Op::LengthDistribution { probs, n, d }, &[probs])
    }

    /// Expected copy-alignment tensor `n × length × d`.
    pub fn marginal_fertility(&mut self, probs: Var, length: usize) -> Result<Var> {
        let (n, d) = self.fertility_dims("marginal_fertility", probs)?;
        let out = fertility::marginal_forward(self.value(probs).data(), n, d, length, &mut 0)?;
        let out = Array::new([n, length, d], out).unwrap();
        self.push(
            "marginal_fertility",
            out,
            Op::MarginalFertility { probs, n, d, length },
            &[probs],
        )
    }

    fn fertility_dims(&self, op: &'static str, probs: Var) -> Result<(usize, usize)> {
        match self.value(probs).dims2() {
            Some((n, c)) if n >= 1 && c >= 2 => Ok((n, c - 1)),
            _ => Err(Error::shape(op, &[self.shape(probs)])),
        }
    }

    /// Expected `length × length` permutation matrix from a
    /// `[num_spans(length), 2]` score array.
    pub fn expected_permutation(&mut self, scores: Var, length: usize) -> Result<Var> {
        if length == 0 || self.shape(scores) != [reordering::num_spans(length), 2] {
            return Err(Error::shape(
                "expected_permutation",
                &[self.shape(scores), &[reordering::num_spans(length), 2]],
            ));
        }
        let cache = PermutationCache::forward(length, self.value(scores).data(), true);
        let out = Array::new([length, length], cache.root_matrix()).unwrap();
        self.push(
            "expected_permutation",
            out,
            Op::ExpectedPermutation { scores, cache: Box::new(cache) },
            &[scores],
        )
    }

    /// Reverse sweep from a scalar `root`, accumulating into leaf gradients.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let shape = self.shape(root);
        if shape.iter().product::<usize>() != 1 || shape.len() > 1 {
            return Err(Error::NonScalarRoot(shape.to_vec()));
        }
        if self.grads.len() < self.nodes.len() {
            self.grads.resize(self.nodes.len(), None);
        }
        let mut adj: Vec<Option<Array>> = vec![None; root.0 + 1];
        adj[root.0] = Some(Array::full(self.shape(root), 1.0));
        for idx in (0..=root.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut self.grads[idx] {
                    Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(g),
                }
                continue;
            }
            self.propagate(idx, &g, &mut adj);
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &Array, adj: &mut [Option<Array>]) {
        let nodes = &self.nodes;
        let out = &nodes[idx].value;
        let gd = g.data();
        macro_rules! with {
            ($v:expr, |$buf:ident| $body:expr) => {
                if let Some($buf) = adjoint(nodes, adj, $v) {
                    $body
                }
            };
        }
        match &nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                with!(*a, |ga| axpy(ga, gd, 1.0));
                with!(*b, |gb| axpy(gb, gd, 1.0));
            }
            Op::Sub(a, b) => {
                with!(*a, |ga| axpy(ga, gd, 1.0));
                with!(*b, |gb| axpy(gb, gd, -1.0));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                with!(*a, |ga| for ((x, g), y) in ga.iter_mut().zip(gd).zip(vb) {
                    *x += g * y;
                });
                with!(*b, |gb| for ((x, g), y) in gb.iter_mut().zip(gd).zip(va) {
                    *x += g * y;
                });
            }
            Op::Scale(a, c) => with!(*a, |ga| axpy(ga, gd, *c)),
            Op::AddRow(a, row) => {
                with!(*a, |ga| axpy(ga, gd, 1.0));
                let n = nodes[row.0].value.len();
                with!(*row, |gr| for chunk in gd.chunks(n) {
                    axpy(gr, chunk, 1.0);
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = nodes[a.0].value.dims2().unwrap();
                let n = out.shape()[1];
                let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                // dA = G · Bᵀ, dB = Aᵀ · G
                with!(*a, |ga| gemm(m, n, k, gd, (n as isize, 1), vb, (1, n as isize), ga));
                with!(*b, |gb| gemm(k, m, n, va, (1, k as isize), gd, (n as isize, 1), gb));
            }
            Op::Transpose(a) => {
                let s = out.shape();
                let r = s.len();
                let batch = s[..r - 2].iter().product();
                with!(*a, |ga| {
                    let mut tmp = vec![0.0; gd.len()];
                    transpose_into(gd, &mut tmp, batch, s[r - 2], s[r - 1]);
                    axpy(ga, &tmp, 1.0);
                });
            }
            Op::Reshape(a) => with!(*a, |ga| axpy(ga, gd, 1.0)),
            Op::Concat { parts, axis } => {
                let (outer, _, inner) = around(out.shape(), *axis);
                let total = out.shape()[*axis];
                let mut offset = 0;
                for p in parts {
                    let e = nodes[p.0].value.shape()[*axis];
                    with!(*p, |gp| for o in 0..outer {
                        let src = &gd[(o * total + offset) * inner..(o * total + offset + e) * inner];
                        axpy(&mut gp[o * e * inner..(o + 1) * e * inner], src, 1.0);
                    });
                    offset += e;
                }
            }
            Op::Slice { src, axis, start } => {
                let (outer, e, inner) = around(nodes[src.0].value.shape(), *axis);
                let len = out.shape()[*axis];
                with!(*src, |gs| for o in 0..outer {
                    let base = o * e * inner + start * inner;
                    axpy(&mut gs[base..base + len * inner], &gd[o * len * inner..(o + 1) * len * inner], 1.0);
                });
            }
            Op::Gather { src, rows } => {
                let n = out.shape()[1];
                with!(*src, |gs| for (k, &r) in rows.iter().enumerate() {
                    axpy(&mut gs[r * n..(r + 1) * n], &gd[k * n..(k + 1) * n], 1.0);
                });
            }
            Op::Pick { src, flat } => {
                with!(*src, |gs| for (k, &f) in flat.iter().enumerate() {
                    gs[f] += gd[k];
                });
            }
            Op::Sum(a) => with!(*a, |ga| ga.iter_mut().for_each(|x| *x += gd[0])),
            Op::SumAxis { src, axis } => {
                let (outer, e, inner) = around(nodes[src.0].value.shape(), *axis);
                with!(*src, |gs| for o in 0..outer {
                    for k in 0..e {
                        let base = (o * e + k) * inner;
                        axpy(&mut gs[base..base + inner], &gd[o * inner..(o + 1) * inner], 1.0);
                    }
                });
            }
            Op::Exp(a) => with!(*a, |ga| for ((x, g), y) in ga.iter_mut().zip(gd).zip(out.data()) {
                *x += g * y;
            }),
            Op::Log(a) => {
                let va = nodes[a.0].value.data();
                with!(*a, |ga| for ((x, g), y) in ga.iter_mut().zip(gd).zip(va) {
                    *x += g / y;
                });
            }
            Op::Tanh(a) => with!(*a, |ga| for ((x, g), y) in ga.iter_mut().zip(gd).zip(out.data()) {
                *x += g * (1.0 - y * y);
            }),
            Op::Sigmoid(a) => with!(*a, |ga| for ((x, g), y) in ga.iter_mut().zip(gd).zip(out.data()) {
                *x += g * y * (1.0 - y);
            }),
            Op::Softmax { src, temperature } => {
                let last = *out.shape().last().unwrap();
                with!(*src, |gs| if last > 0 {
                    for ((gsr, gr), yr) in gs.chunks_mut(last).zip(gd.chunks(last)).zip(out.data().chunks(last)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((x, g), y) in gsr.iter_mut().zip(gr).zip(yr) {
                            *x += y * (g - dot) / temperature;
                        }
                    }
                });
            }
            Op::LogSumExp { src, axis } => {
                let (outer, e, inner) = around(nodes[src.0].value.shape(), *axis);
                let vs = nodes[src.0].value.data();
                let vo = out.data();
                with!(*src, |gs| for o in 0..outer {
                    for k in 0..e {
                        for c in 0..inner {
                            let at = (o * e + k) * inner + c;
                            gs[at] += gd[o * inner + c] * (vs[at] - vo[o * inner + c]).exp();
                        }
                    }
                });
            }
            Op::LengthDistribution { probs, n, d } => {
                let p = nodes[probs.0].value.data();
                with!(*probs, |gp| fertility::length_distribution_vjp(p, *n, *d, gd, gp));
            }
            Op::MarginalFertility { probs, n, d, length } => {
                let p = nodes[probs.0].value.data();
                with!(*probs, |gp| fertility::marginal_vjp(p, *n, *d, *length, out.data(), gd, gp));
            }
            Op::ExpectedPermutation { scores, cache } => {
                with!(*scores, |gs| axpy(gs, &cache.backward(gd), 1.0));
            }
        }
    }
}

/// Adjoint buffer for `v`, allocated on first use; `None` if `v` needs no
/// gradient.
fn adjoint<'a>(nodes: &[Node], adj: &'a mut [Option<Array>], v: Var) -> Option<&'a mut [f64]> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let a = adj[v.0].get_or_insert_with(|| Array::zeros(nodes[v.0].value.shape()));
    Some(a.data_mut())
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn axpy(dst: &mut [f64], src: &[f64], alpha: f64) {
    for (x, y) in dst.iter_mut().zip(src) {
        *x += alpha * y;
    }
}

fn transpose_into(src: &[f64], dst: &mut [f64], batch: usize, p: usize, q: usize) {
    for b in 0..batch {
        let s = &src[b * p * q..(b + 1) * p * q];
        let d = &mut dst[b * p * q..(b + 1) * p * q];
        for i in 0..p {
            for j in 0..q {
                d[j * p + i] = s[i * q + j];
            }
        }
    }
}

/// `c += a · b` with `a: m × k`, `b: k × n`, arbitrary (row, col) strides
/// for `a` and `b`; `c` is contiguous row-major.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], sa: (isize, isize), b: &[f64], sb: (isize, isize), c: &mut [f64]) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // SAFETY: the strides describe in-bounds views of `a` and `b`, and `c`
    // holds exactly m·n values.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0,
            sa.1,
            b.as_ptr(),
            sb.0,
            sb.1,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_symmetric() {
        let mut t = Tape::new();
        let z = t.constant(Array::row(vec![0.0, 0.0]));
        let s = t.softmax(z, 1.0).unwrap();
        assert_eq!(t.value(s).data(), &[0.5, 0.5]);
        assert!(matches!(t.softmax(z, 0.0), Err(Error::Domain { .. })));
    }

    #[test]
    fn lse_of_quarters() {
        let mut t = Tape::new();
        let q = 0.25f64.ln();
        let z = t.constant(Array::vector(vec![q, q]));
        let s = t.log_sum_exp(z, 0).unwrap();
        assert!((t.value(s).data()[0] - 0.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut t = Tape::new();
        let x = t.var(Array::vector(vec![1.0, 2.0, 3.0]));
        let xx = t.mul(x, x).unwrap();
        let s = t.sum(xx).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn product_gradient_and_accumulation() {
        let mut t = Tape::new();
        let w = t.var(Array::scalar(3.0));
        let x = t.constant(Array::scalar(2.0));
        let y = t.mul(w, x).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(w).unwrap().data(), &[2.0]);
        assert!(t.grad(x).is_none());
        t.backward(y).unwrap();
        assert_eq!(t.grad(w).unwrap().data(), &[4.0]);
        t.zero_grad();
        assert!(t.grad(w).is_none());
    }

    #[test]
    fn constant_root_has_no_gradient() {
        let mut t = Tape::new();
        let w = t.var(Array::scalar(3.0));
        let c = t.constant(Array::scalar(1.0));
        t.backward(c).unwrap();
        assert!(t.grad(w).is_none());
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut t = Tape::new();
        let x = t.var(Array::vector(vec![1.0, 2.0]));
        assert!(matches!(t.backward(x), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut t = Tape::new();
        let a = t.var(Array::zeros([2, 3]));
        let b = t.var(Array::zeros([2, 2]));
        match t.matmul(a, b) {
            Err(Error::Shape { op, shapes }) => {
                assert_eq!(op, "matmul");
                assert_eq!(shapes, vec![vec![2, 3], vec![2, 2]]);
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(t.add(a, b), Err(Error::Shape { op: "add", .. })));
    }

    #[test]
    fn log_of_zero_is_an_error() {
        let mut t = Tape::new();
        let x = t.var(Array::vector(vec![0.0]));
        assert!(matches!(t.log(x), Err(Error::NonFinite { op: "log" })));
    }

    #[test]
    fn matmul_values() {
        let mut t = Tape::new();
        let a = t.var(Array::new([2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = t.var(Array::new([2, 1], vec![5.0, 6.0]).unwrap());
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[17.0, 39.0]);
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let mut t = Tape::new();
        let a = t.var(Array::new([2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = t.var(Array::new([2, 1], vec![5.0, 6.0]).unwrap());
        let c = t.concat(&[a, b], 1).unwrap();
        assert_eq!(t.value(c).data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let s = t.slice(c, 1, 2, 1).unwrap();
        assert_eq!(t.value(s).data(), &[5.0, 6.0]);
    }
}
