//! The dual-path embedding network.
//!
//! A signal matrix `x` and its slow-time spectrum `x_f` feed a spatial path
//! (an image backbone) and a temporal path (two LSTMs joined by bilinear
//! attention). Their outputs are summed into `H_fuse`, which a linear head maps
//! to class logits. The network also exposes three embeddings used by the
//! metric head: the final LSTM-block states of both sequences and `H_fuse`.

pub mod config;
pub mod spatial;
pub mod temporal;

use rand::Rng;

pub use config::{Backbone, BaseNetConfig, SpatialMode};
pub use spatial::{Branch, Cnn5, SpatialModule};
pub use temporal::{bilinear_attention, ComposeModule, TemporalModule, TemporalOutput};

use crate::error::{dim_err, Error, Result};
use crate::numerics::{fft_magnitude_slow_time, Graph, ParamId, ParamStore, Scalar, Tensor, Var};

/// Number of embeddings handed to the metric head.
pub const NUM_FEATURES: usize = 3;

/// Embedding nodes in fixed order `(h_time_K, h_freq_K, h_fuse)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureVars(pub [Var; NUM_FEATURES]);

/// Embedding values in fixed order `(h_time_K, h_freq_K, h_fuse)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet<T> {
    pub h_time_k: Vec<T>,
    pub h_freq_k: Vec<T>,
    pub h_fuse: Vec<T>,
}

impl<T: Scalar> FeatureSet<T> {
    pub fn get(&self, m: usize) -> &[T] {
        match m {
            0 => &self.h_time_k,
            1 => &self.h_freq_k,
            2 => &self.h_fuse,
            _ => panic!("feature index {m} out of range"),
        }
    }

    pub fn is_finite(&self) -> bool {
        (0..NUM_FEATURES).all(|m| self.get(m).iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BaseOutput {
    pub logits: Var,
    pub features: FeatureVars,
    pub h_spat: Var,
    pub h_temp: Var,
    pub temporal: TemporalOutput,
}

impl BaseOutput {
    pub fn feature_values<T: Scalar>(&self, g: &Graph<T>) -> FeatureSet<T> {
        let [a, b, c] = self.features.0;
        FeatureSet {
            h_time_k: g.value(a).data().to_vec(),
            h_freq_k: g.value(b).data().to_vec(),
            h_fuse: g.value(c).data().to_vec(),
        }
    }
}

/// Slow-time FFT magnitude with unitary `1/√K` scaling, so the spectrum keeps
/// the energy of the input.
pub fn spectrum<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (k, _, _) = x.dims3()?;
    let s = T::of(1.0 / (k as f64).sqrt());
    Ok(fft_magnitude_slow_time(x)?.map(|v| v * s))
}

/// Parameter handles of the base network; values live in a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct BaseNetwork {
    pub cfg: BaseNetConfig,
    /// Input shape `[K, L, Nr]`.
    pub shape: [usize; 3],
    pub spatial: SpatialModule,
    pub temporal: TemporalModule,
    pub compose: ComposeModule,
    /// Classifier `W_1`, `2α×N_c`.
    pub w1: ParamId,
}

impl BaseNetwork {
    pub fn new<T: Scalar, R: Rng>(
        cfg: &BaseNetConfig,
        shape: [usize; 3],
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        if shape.contains(&0) {
            return Err(Error::Config(format!("input shape {shape:?} has a zero dimension")));
        }
        let spatial = SpatialModule::new(store, cfg, shape, rng)?;
        let temporal = TemporalModule::new(store, shape, cfg.alpha, cfg.iota, rng)?;
        let compose = ComposeModule::new(store, cfg.alpha, rng)?;
        let w1 = store.add_uniform("head.w1", &[2 * cfg.alpha, cfg.num_classes], 2 * cfg.alpha, rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            shape,
            spatial,
            temporal,
            compose,
            w1,
        })
    }

    /// Full forward pass from a `K×L×Nr` matrix.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: &Tensor<T>) -> Result<BaseOutput> {
        let x_f = spectrum(x)?;
        self.forward_with_spectrum(g, store, x, &x_f)
    }

    pub fn forward_with_spectrum<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: &Tensor<T>,
        x_f: &Tensor<T>,
    ) -> Result<BaseOutput> {
        if x.shape() != self.shape || x_f.shape() != self.shape {
            return dim_err(format!(
                "network expects input {:?}, got {:?} and {:?}",
                self.shape,
                x.shape(),
                x_f.shape()
            ));
        }
        let [k, l, nr] = self.shape;
        let act = self.cfg.activation;
        let xv = g.constant(x.clone())?;
        let fv = g.constant(x_f.clone())?;

        let h_spat = self.spatial.forward(g, store, xv, fv, self.cfg.alpha, act)?;

        let x_seq = g.reshape(xv, &[k, l * nr])?;
        let f_seq = g.reshape(fv, &[k, l * nr])?;
        let temporal = self.temporal.forward(g, store, x_seq, f_seq, act)?;
        let h_time_k = g.row(temporal.h_time, k - 1)?;
        let h_freq_k = g.row(temporal.h_freq, k - 1)?;
        let h_temp = self.compose.forward(g, store, h_time_k, h_freq_k, act)?;

        let h_fuse = g.add(h_temp, h_spat)?;
        let row = g.reshape(h_fuse, &[1, 2 * self.cfg.alpha])?;
        let w1 = g.param(store, self.w1);
        let logits = g.matmul(row, w1)?;
        let logits = g.reshape(logits, &[self.cfg.num_classes])?;
        Ok(BaseOutput {
            logits,
            features: FeatureVars([h_time_k, h_freq_k, h_fuse]),
            h_spat,
            h_temp,
            temporal,
        })
    }

    /// Logits and embeddings without keeping the tape.
    pub fn infer<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<(Vec<T>, FeatureSet<T>)> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, store, x)?;
        Ok((g.value(out.logits).data().to_vec(), out.feature_values(&g)))
    }

    /// Every parameter except the classifier.
    pub fn body_ids<T: Scalar>(&self, store: &ParamStore<T>) -> Vec<ParamId> {
        store
            .ids_in(crate::numerics::Partition::Base)
            .into_iter()
            .filter(|&id| id != self.w1)
            .collect()
    }

    pub fn spatial_param_count<T: Scalar>(&self, store: &ParamStore<T>) -> usize {
        store
            .iter()
            .filter(|p| p.name().starts_with("spatial."))
            .map(|p| p.value.len())
            .sum()
    }
}
