//! Recurrent features along slow time with bilinear attention between the
//! signal and spectrum sequences.

use rand::Rng;

use crate::error::{dim_err, Result};
use crate::numerics::{Activation, Dense, Graph, Lstm, ParamId, ParamStore, Scalar, Tensor, Var};

/// `softmax_rows((W ∘ Ht†) · Hf†ᵀ)`, a `K×K` row-stochastic map.
pub fn bilinear_attention<T: Scalar>(g: &mut Graph<T>, ht_dag: Var, hf_dag: Var, w: Var) -> Result<Var> {
    if g.shape(ht_dag) != g.shape(hf_dag) || g.shape(w) != g.shape(ht_dag) {
        return dim_err(format!(
            "attention inputs {:?}, {:?} and weight {:?} must share a K×ι shape",
            g.shape(ht_dag),
            g.shape(hf_dag),
            g.shape(w)
        ));
    }
    let weighted = g.mul(w, ht_dag)?;
    let hf_t = g.transpose(hf_dag)?;
    let scores = g.matmul(weighted, hf_t)?;
    g.softmax_rows(scores)
}

#[derive(Debug, Clone, Copy)]
pub struct TemporalOutput {
    /// `K×α` outputs after the residual attention block.
    pub h_time: Var,
    pub h_freq: Var,
    /// Raw LSTM states, `K×α`.
    pub lstm_time: Var,
    pub lstm_freq: Var,
    pub attention: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemporalModule {
    pub lstm_time: Lstm,
    pub lstm_freq: Lstm,
    pub proj_time: Dense,
    pub proj_freq: Dense,
    /// Attention weight `W`, `K×ι`.
    pub attention_w: ParamId,
    pub post_time: Dense,
    pub post_freq: Dense,
}

impl TemporalModule {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        shape: [usize; 3],
        alpha: usize,
        iota: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let [k, l, nr] = shape;
        let d_in = l * nr;
        Ok(Self {
            lstm_time: Lstm::new(store, "temporal.lstm_time", d_in, alpha, rng)?,
            lstm_freq: Lstm::new(store, "temporal.lstm_freq", d_in, alpha, rng)?,
            proj_time: Dense::new(store, "temporal.proj_time", alpha, iota, rng)?,
            proj_freq: Dense::new(store, "temporal.proj_freq", alpha, iota, rng)?,
            attention_w: store.add_uniform("temporal.attention_w", &[k, iota], iota, rng)?,
            post_time: Dense::new(store, "temporal.post_time", alpha, alpha, rng)?,
            post_freq: Dense::new(store, "temporal.post_freq", alpha, alpha, rng)?,
        })
    }

    /// `x_seq`, `xf_seq` are `K×(L·Nr)`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x_seq: Var,
        xf_seq: Var,
        act: Activation,
    ) -> Result<TemporalOutput> {
        let d_h = self.lstm_time.d_h;
        let h0 = g.constant(Tensor::zeros(&[d_h]))?;
        let c0 = g.constant(Tensor::zeros(&[d_h]))?;
        let lstm_time = self.lstm_time.forward(g, store, x_seq, h0, c0)?;
        let lstm_freq = self.lstm_freq.forward(g, store, xf_seq, h0, c0)?;

        let ht_dag = self.proj_time.forward(g, store, lstm_time, Some(act))?;
        let hf_dag = self.proj_freq.forward(g, store, lstm_freq, Some(act))?;
        let w = g.param(store, self.attention_w);
        let attention = bilinear_attention(g, ht_dag, hf_dag, w)?;

        // ((H◇)ᵀ A)ᵀ = Aᵀ H◇
        let a_t = g.transpose(attention)?;
        let joint_time = g.matmul(a_t, lstm_time)?;
        let joint_freq = g.matmul(a_t, lstm_freq)?;
        let post_time = self.post_time.forward(g, store, joint_time, Some(act))?;
        let post_freq = self.post_freq.forward(g, store, joint_freq, Some(act))?;
        let h_time = g.add(lstm_time, post_time)?;
        let h_freq = g.add(lstm_freq, post_freq)?;
        Ok(TemporalOutput {
            h_time,
            h_freq,
            lstm_time,
            lstm_freq,
            attention,
        })
    }
}

/// Maps the final-step features and merges them into `H_temp`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComposeModule {
    pub map_time: Dense,
    pub map_freq: Dense,
    pub out: Dense,
}

impl ComposeModule {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, alpha: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            map_time: Dense::new(store, "compose.time", alpha, alpha, rng)?,
            map_freq: Dense::new(store, "compose.freq", alpha, alpha, rng)?,
            out: Dense::new(store, "compose.out", 2 * alpha, 2 * alpha, rng)?,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        h_time_k: Var,
        h_freq_k: Var,
        act: Activation,
    ) -> Result<Var> {
        let a = self.map_time.forward(g, store, h_time_k, Some(act))?;
        let b = self.map_freq.forward(g, store, h_freq_k, Some(act))?;
        let stacked = g.concat(&[a, b])?;
        let out = self.out.forward(g, store, stacked, None)?;
        let n = g.value(out).len();
        g.reshape(out, &[n])
    }
}
