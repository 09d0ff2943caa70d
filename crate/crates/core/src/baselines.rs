//! Comparison methods sharing the base network: head fine-tuning, a
//! prototype classifier, and the metric head with frozen uniform weights.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::meta::{
    argmax, predict_queries, run_schedule, train, Embedding, EpisodeBatch, LossRecord, MetaUpdate, RfNet, TrainConfig,
};
use crate::numerics::{sgd_step, AdamState, Graph, ParamStore, Partition, Scalar, Tensor, Var};
use crate::signal::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    RfNet,
    /// Metric head with `η` frozen at ones.
    RfNetStar,
    /// Base network whose classifier `W_1` is refit on the support set.
    FineTune,
    /// Nearest prototype by squared Euclidean distance on `h_fuse`.
    ProtoNet,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::RfNet, Method::RfNetStar, Method::FineTune, Method::ProtoNet];

    pub fn name(self) -> &'static str {
        match self {
            Method::RfNet => "rfnet",
            Method::RfNetStar => "rfnet-star",
            Method::FineTune => "ft",
            Method::ProtoNet => "pn",
        }
    }

    pub fn is_baseline(self) -> bool {
        self != Method::RfNet
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}; expected rfnet, rfnet-star, ft or pn")))
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

/// Head refit used by [`Method::FineTune`] at test time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FineTuneConfig {
    pub steps: usize,
    pub lr: f64,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        Self { steps: 50, lr: 0.1 }
    }
}

/// Trains `model` for `method`. RF-Net* and FT share the frozen-`η` schedule:
/// the base network sees exactly the updates RF-Net's inner step applies.
pub fn train_method<T: Scalar>(
    method: Method,
    model: &mut RfNet<T>,
    data: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
    on_record: impl FnMut(&LossRecord),
) -> Result<Vec<LossRecord>> {
    match method {
        Method::RfNet => train(model, data, cfg, seed, on_record),
        Method::RfNetStar | Method::FineTune => {
            let cfg = TrainConfig {
                meta_update: MetaUpdate::Frozen,
                ..cfg.clone()
            };
            train(model, data, &cfg, seed, on_record)
        }
        Method::ProtoNet => train_protonet(model, data, cfg, seed, on_record),
    }
}

/// Gradient descent on the support cross-entropy of `h_fuse · W_1`, touching
/// only `W_1`. Returns the refit head.
pub fn finetune_head<T: Scalar>(w1: &Tensor<T>, support: &[(&[T], usize)], cfg: FineTuneConfig) -> Result<Tensor<T>> {
    if support.is_empty() {
        return Err(Error::Episode("empty support set".into()));
    }
    let mut store = ParamStore::new();
    let id = store.add("w1", Partition::Base, w1.clone())?;
    let feats: Vec<Tensor<T>> = support
        .iter()
        .map(|(h, _)| Tensor::matrix(1, h.len(), h.to_vec()))
        .collect::<Result<_>>()?;
    for _ in 0..cfg.steps {
        let mut g = Graph::new();
        let w = g.param(&store, id);
        let mut losses = Vec::with_capacity(support.len());
        for (h, &(_, label)) in feats.iter().zip(support) {
            let hv = g.constant(h.clone())?;
            let logits = g.matmul(hv, w)?;
            let n = g.value(logits).len();
            let logits = g.reshape(logits, &[n])?;
            losses.push(g.softmax_cross_entropy(logits, label)?);
        }
        let loss = g.mean_of(&losses)?;
        g.backward_into(loss, &mut store)?;
        sgd_step(&mut store, &[id], cfg.lr)?;
    }
    Ok(store.value(id).clone())
}

/// Copy of `model` with `W_1` refit on the support embeddings.
pub fn finetune_adapt<T: Scalar>(
    model: &RfNet<T>,
    support: &[Vec<&Embedding<T>>],
    cfg: FineTuneConfig,
) -> Result<RfNet<T>> {
    let pairs: Vec<(&[T], usize)> = support
        .iter()
        .enumerate()
        .flat_map(|(c, shots)| shots.iter().map(move |e| (e.features.h_fuse.as_slice(), c)))
        .collect();
    let w1 = finetune_head(model.store.value(model.net.w1), &pairs, cfg)?;
    let mut out = model.clone();
    *out.store.value_mut(out.net.w1) = w1;
    Ok(out)
}

/// `h_fuse · W_1` for a single observation.
pub fn head_logits<T: Scalar>(w1: &Tensor<T>, h_fuse: &[T]) -> Result<Vec<T>> {
    let (rows, cols) = w1.dims2()?;
    if rows != h_fuse.len() {
        return Err(Error::Dimension(format!(
            "feature of length {} for a {rows}×{cols} head",
            h_fuse.len()
        )));
    }
    let w = w1.data();
    Ok((0..cols)
        .map(|j| h_fuse.iter().enumerate().map(|(i, &h)| h * w[i * cols + j]).sum())
        .collect())
}

/// Per-class mean of the support features.
pub fn prototypes<T: Scalar>(support: &[Vec<&[T]>]) -> Result<Vec<Vec<T>>> {
    support
        .iter()
        .enumerate()
        .map(|(c, shots)| {
            let first = shots
                .first()
                .ok_or_else(|| Error::Episode(format!("class {c} has no support shots")))?;
            let mut acc = vec![T::zero(); first.len()];
            for s in shots {
                if s.len() != acc.len() {
                    return Err(Error::Dimension("support features differ in length".into()));
                }
                for (a, &v) in acc.iter_mut().zip(s.iter()) {
                    *a = *a + v;
                }
            }
            let n = T::of(shots.len() as f64);
            Ok(acc.into_iter().map(|a| a / n).collect())
        })
        .collect()
}

/// `−‖query − prototype_j‖²` for every class.
pub fn protonet_predict<T: Scalar>(support: &[Vec<&[T]>], query: &[T]) -> Result<Vec<T>> {
    prototypes(support)?
        .iter()
        .map(|p| {
            if p.len() != query.len() {
                return Err(Error::Dimension("query and prototype lengths differ".into()));
            }
            Ok(-p.iter().zip(query).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>())
        })
        .collect()
}

/// Graph version of [`protonet_predict`] over `h_fuse` nodes.
pub fn protonet_logits_graph<T: Scalar>(g: &mut Graph<T>, support: &[Vec<Var>], query: Var) -> Result<Var> {
    let mut logits = Vec::with_capacity(support.len());
    for (c, shots) in support.iter().enumerate() {
        if shots.is_empty() {
            return Err(Error::Episode(format!("class {c} has no support shots")));
        }
        let proto = g.mean_of(shots)?;
        let diff = g.sub(query, proto)?;
        let sq = g.mul(diff, diff)?;
        let d = g.sum_all(sq)?;
        logits.push(g.scale(d, -T::one())?);
    }
    g.concat(&logits)
}

/// One Adam step on `Φ` against the prototype loss of an episode.
pub fn protonet_train_step<T: Scalar>(
    model: &mut RfNet<T>,
    adam: &mut AdamState<T>,
    support: &[Vec<&Tensor<T>>],
    query: &[(&Tensor<T>, usize)],
) -> Result<f64> {
    if query.is_empty() {
        return Err(Error::Episode("episode has no queries".into()));
    }
    let mut g = Graph::new();
    let mut sup = Vec::with_capacity(support.len());
    for shots in support {
        let mut v = Vec::with_capacity(shots.len());
        for x in shots {
            v.push(model.net.forward(&mut g, &model.store, x)?.features.0[2]);
        }
        sup.push(v);
    }
    let mut losses = Vec::with_capacity(query.len());
    for &(x, label) in query {
        let q = model.net.forward(&mut g, &model.store, x)?.features.0[2];
        let logits = protonet_logits_graph(&mut g, &sup, q)?;
        losses.push(g.softmax_cross_entropy(logits, label)?);
    }
    let loss = g.mean_of(&losses)?;
    let value = g.scalar(loss).as_f64();
    g.backward_into(loss, &mut model.store)?;
    let ids = model.store.ids_in(Partition::Base);
    adam.step(&mut model.store, &ids)?;
    Ok(value)
}

/// Episodic prototype training with the same schedule as RF-Net. The
/// prototype loss is recorded as the inner loss; there is no meta step.
pub fn train_protonet<T: Scalar>(
    model: &mut RfNet<T>,
    data: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
    on_record: impl FnMut(&LossRecord),
) -> Result<Vec<LossRecord>> {
    let mut adam = AdamState::new(cfg.lr_inner);
    run_schedule(
        data,
        cfg,
        seed,
        |b: &EpisodeBatch<T>| {
            let loss = protonet_train_step(model, &mut adam, &b.support_refs(), &b.query_refs())?;
            Ok((loss, None))
        },
        on_record,
    )
}

/// Predicted query labels for `method` given cached embeddings of one episode.
pub fn predict_episode<T: Scalar>(
    method: Method,
    model: &RfNet<T>,
    eta: &Tensor<T>,
    support: &[Vec<&Embedding<T>>],
    query: &[&Embedding<T>],
    ft: FineTuneConfig,
) -> Result<Vec<usize>> {
    match method {
        Method::RfNet | Method::RfNetStar => predict_queries(eta, support, query, true),
        Method::FineTune => {
            let pairs: Vec<(&[T], usize)> = support
                .iter()
                .enumerate()
                .flat_map(|(c, shots)| shots.iter().map(move |e| (e.features.h_fuse.as_slice(), c)))
                .collect();
            let w1 = finetune_head(model.store.value(model.net.w1), &pairs, ft)?;
            query
                .iter()
                .map(|q| Ok(argmax(&head_logits(&w1, &q.features.h_fuse)?)))
                .collect()
        }
        Method::ProtoNet => {
            let sup: Vec<Vec<&[T]>> = support
                .iter()
                .map(|s| s.iter().map(|e| e.features.h_fuse.as_slice()).collect())
                .collect();
            query
                .iter()
                .map(|q| Ok(argmax(&protonet_predict(&sup, &q.features.h_fuse)?)))
                .collect()
        }
    }
}
