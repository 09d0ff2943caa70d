//! Dense, convolution and LSTM layers built on the tape.

use rand::Rng;

use super::graph::{Activation, Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::Scalar;
use crate::error::{dim_err, Result};

/// `out = x·W + bias`, bias broadcast over rows.
pub fn dense_forward<T: Scalar>(g: &mut Graph<T>, x: Var, w: Var, bias: Var) -> Result<Var> {
    let xw = g.matmul(x, w)?;
    g.add_bias(xw, bias)
}

/// Multi-channel cross-correlation plus optional per-channel bias.
pub fn conv2d_forward<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    kernels: Var,
    bias: Option<Var>,
    stride: usize,
    pad: usize,
) -> Result<Var> {
    let y = g.conv2d(x, kernels, stride, pad)?;
    match bias {
        Some(b) => g.add_channel_bias(y, b),
        None => Ok(y),
    }
}

pub fn softmax<T: Scalar>(g: &mut Graph<T>, v: Var) -> Result<Var> {
    g.softmax_rows(v)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Dense {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.add_uniform(&format!("{name}.w"), &[fan_in, fan_out], fan_in, rng)?;
        let b = store.add_zeros(&format!("{name}.b"), &[fan_out])?;
        Ok(Self { w, b, fan_in, fan_out })
    }

    /// Applies the layer to an `n×fan_in` matrix (a vector is treated as one row).
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        act: Option<Activation>,
    ) -> Result<Var> {
        let x = if g.shape(x).len() == 1 {
            let n = g.shape(x)[0];
            g.reshape(x, &[1, n])?
        } else {
            x
        };
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = dense_forward(g, x, w, b)?;
        match act {
            Some(a) => g.activation(y, a),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2d {
    pub k: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let fan_in = c_in * kernel * kernel;
        let k = store.add_uniform(&format!("{name}.k"), &[c_out, c_in, kernel, kernel], fan_in, rng)?;
        let b = store.add_zeros(&format!("{name}.b"), &[c_out])?;
        Ok(Self { k, b, stride, pad })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let k = g.param(store, self.k);
        let b = g.param(store, self.b);
        conv2d_forward(g, x, k, Some(b), self.stride, self.pad)
    }
}

/// LSTM with fused gate weights, gate column order `[input, forget, candidate, output]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Lstm {
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_h: usize,
}

impl Lstm {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_h: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w_x = store.add_uniform(&format!("{name}.w_x"), &[d_in, 4 * d_h], d_in, rng)?;
        let w_h = store.add_uniform(&format!("{name}.w_h"), &[d_h, 4 * d_h], d_h, rng)?;
        let b = store.add_zeros(&format!("{name}.b"), &[4 * d_h])?;
        Ok(Self { w_x, w_h, b, d_in, d_h })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, h0: Var, c0: Var) -> Result<Var> {
        let w_x = g.param(store, self.w_x);
        let w_h = g.param(store, self.w_h);
        let b = g.param(store, self.b);
        lstm_forward(g, x, w_x, w_h, b, h0, c0)
    }
}

/// Runs an LSTM over the rows of `x[K×d_in]`, returning every hidden state as `K×d_h`.
pub fn lstm_forward<T: Scalar>(g: &mut Graph<T>, x: Var, w_x: Var, w_h: Var, b: Var, h0: Var, c0: Var) -> Result<Var> {
    let (k, d_in) = g.value(x).dims2()?;
    if k == 0 {
        return dim_err("LSTM needs at least one step");
    }
    let (wx_in, four_h) = g.value(w_x).dims2()?;
    if wx_in != d_in || four_h % 4 != 0 {
        return dim_err(format!("LSTM input weights {:?} for input width {d_in}", g.shape(w_x)));
    }
    let d_h = four_h / 4;
    if g.value(w_h).shape() != [d_h, four_h] {
        return dim_err(format!("LSTM recurrent weights {:?}", g.shape(w_h)));
    }
    if g.value(h0).len() != d_h || g.value(c0).len() != d_h {
        return dim_err("LSTM initial state width");
    }

    // Input projections for every step at once.
    let xw = dense_forward(g, x, w_x, b)?;
    let mut h = g.reshape(h0, &[1, d_h])?;
    let mut c = g.reshape(c0, &[1, d_h])?;
    let mut states = Vec::with_capacity(k);
    for t in 0..k {
        let xt = g.row(xw, t)?;
        let xt = g.reshape(xt, &[1, four_h])?;
        let hw = g.matmul(h, w_h)?;
        let z = g.add(xt, hw)?;
        let i_pre = g.slice_cols(z, 0, d_h)?;
        let f_pre = g.slice_cols(z, d_h, 2 * d_h)?;
        let c_pre = g.slice_cols(z, 2 * d_h, 3 * d_h)?;
        let o_pre = g.slice_cols(z, 3 * d_h, 4 * d_h)?;
        let i = g.activation(i_pre, Activation::Sigmoid)?;
        let f = g.activation(f_pre, Activation::Sigmoid)?;
        let cand = g.activation(c_pre, Activation::Tanh)?;
        let o = g.activation(o_pre, Activation::Sigmoid)?;
        let keep = g.mul(f, c)?;
        let write = g.mul(i, cand)?;
        c = g.add(keep, write)?;
        let tc = g.activation(c, Activation::Tanh)?;
        h = g.mul(o, tc)?;
        states.push(h);
    }
    g.stack_rows(&states)
}
