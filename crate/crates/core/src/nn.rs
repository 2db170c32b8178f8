//! Layers assembled from tape primitives.

use rand::Rng;

use crate::autodiff::Var;
use crate::error::Result;
use crate::params::{Graph, ParamId, ParameterStore};
use crate::tensor::Array;

/// Uniform initialization range for weight matrices; biases start at zero.
pub const INIT_SCALE: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(store: &mut ParameterStore, name: &str, input: usize, output: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Linear {
            weight: store.uniform(&format!("{name}.weight"), &[input, output], INIT_SCALE, rng)?,
            bias: store.zeros(&format!("{name}.bias"), &[1, output])?,
            input,
            output,
        })
    }

    /// `x · W + b` for `x: [m, input]`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let xw = g.tape.matmul(x, w)?;
        g.tape.add_row(xw, b)
    }
}

/// One hidden `tanh` layer followed by a linear output layer.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParameterStore, name: &str, input: usize, hidden: usize, output: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Mlp {
            hidden: Linear::new(store, &format!("{name}.hidden"), input, hidden, rng)?,
            out: Linear::new(store, &format!("{name}.out"), hidden, output, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.hidden.forward(g, x)?;
        let h = g.tape.tanh(h)?;
        self.out.forward(g, h)
    }
}

/// Single-direction LSTM; gate order input, forget, cell, output.
#[derive(Clone, Debug)]
pub struct Lstm {
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl Lstm {
    pub fn new(store: &mut ParameterStore, name: &str, input: usize, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Lstm {
            w_x: store.uniform(&format!("{name}.w_x"), &[input, 4 * hidden], INIT_SCALE, rng)?,
            w_h: store.uniform(&format!("{name}.w_h"), &[hidden, 4 * hidden], INIT_SCALE, rng)?,
            bias: store.zeros(&format!("{name}.bias"), &[1, 4 * hidden])?,
            input,
            hidden,
        })
    }

    /// Hidden states `[n, hidden]` for `xs: [n, input]`, row `t` aligned
    /// with input `t`. With `reverse`, row `t` summarizes `xs[t..]`.
    pub fn forward(&self, g: &mut Graph, xs: Var, reverse: bool) -> Result<Var> {
        let n = g.tape.shape(xs)[0];
        let h_dim = self.hidden;
        let w_x = g.param(self.w_x);
        let w_h = g.param(self.w_h);
        let b = g.param(self.bias);
        let xw = g.tape.matmul(xs, w_x)?;
        let xw = g.tape.add_row(xw, b)?;
        let mut h = g.tape.constant(Array::zeros([1, h_dim]));
        let mut c = g.tape.constant(Array::zeros([1, h_dim]));
        let mut states = vec![h; n];
        let order: Box<dyn Iterator<Item = usize>> = if reverse {
            Box::new((0..n).rev())
        } else {
            Box::new(0..n)
        };
        for t in order {
            let x_t = g.tape.slice(xw, 0, t, 1)?;
            let rec = g.tape.matmul(h, w_h)?;
            let pre = g.tape.add(x_t, rec)?;
            let sig = g.tape.sigmoid(pre)?;
            let i = g.tape.slice(sig, 1, 0, h_dim)?;
            let f = g.tape.slice(sig, 1, h_dim, h_dim)?;
            let o = g.tape.slice(sig, 1, 3 * h_dim, h_dim)?;
            let cand = g.tape.slice(pre, 1, 2 * h_dim, h_dim)?;
            let cand = g.tape.tanh(cand)?;
            let keep = g.tape.mul(f, c)?;
            let write = g.tape.mul(i, cand)?;
            c = g.tape.add(keep, write)?;
            let tc = g.tape.tanh(c)?;
            h = g.tape.mul(o, tc)?;
            states[t] = h;
        }
        g.tape.concat(&states, 0)
    }
}

/// Forward and backward LSTMs; output rows are `[fwd_t ; bwd_t]`.
#[derive(Clone, Debug)]
pub struct BiLstm {
    pub fwd: Lstm,
    pub bwd: Lstm,
}

impl BiLstm {
    pub fn new(store: &mut ParameterStore, name: &str, input: usize, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(BiLstm {
            fwd: Lstm::new(store, &format!("{name}.fwd"), input, hidden, rng)?,
            bwd: Lstm::new(store, &format!("{name}.bwd"), input, hidden, rng)?,
        })
    }

    pub fn output_dim(&self) -> usize {
        2 * self.fwd.hidden
    }

    pub fn forward(&self, g: &mut Graph, xs: Var) -> Result<Var> {
        let f = self.fwd.forward(g, xs, false)?;
        let b = self.bwd.forward(g, xs, true)?;
        g.tape.concat(&[f, b], 1)
    }
}
