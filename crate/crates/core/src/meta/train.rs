//! Episodic training loop and test-time adaptation of the metric weights.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::episode::{sample_episode, Episode};
use super::model::{embed_episode, inner_train_step, meta_step_on_embeddings, Embedding, RfNet};
use crate::error::{Error, Result};
use crate::numerics::{AdamState, ParamStore, Partition, Scalar, Tensor};
use crate::signal::{mix_seed, Dataset};

const TRAIN_STREAM: u64 = 0x7472_6169_6e00;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TestAdapt {
    None,
    /// One `η` step on a pseudo-episode carved from the support set.
    SelfEpisode,
}

impl FromStr for TestAdapt {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "self_episode" => Ok(Self::SelfEpisode),
            _ => Err(Error::Config(format!("unknown test adaptation {s:?}"))),
        }
    }
}

impl fmt::Display for TestAdapt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::SelfEpisode => "self_episode",
        })
    }
}

/// Whether the meta step runs. `Frozen` leaves `η` at its current value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetaUpdate {
    Trainable,
    Frozen,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr_inner: f64,
    pub lr_meta: f64,
    /// Environments per minibatch; every environment in a batch gets its own episode.
    pub batch_size: usize,
    pub epochs: usize,
    /// Episodes drawn from each training environment per epoch.
    pub episodes_per_env: usize,
    pub n_shots: usize,
    pub n_query: usize,
    /// Applied at evaluation to episodes with at least 2 shots.
    pub test_adapt: TestAdapt,
    pub meta_update: MetaUpdate,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_inner: 1e-3,
            lr_meta: 1e-2,
            batch_size: 3,
            epochs: 20,
            episodes_per_env: 1,
            n_shots: 1,
            n_query: 5,
            test_adapt: TestAdapt::None,
            meta_update: MetaUpdate::Trainable,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr_inner.is_finite() && self.lr_inner > 0.0) {
            return bad("lr_inner must be positive");
        }
        if !(self.lr_meta.is_finite() && self.lr_meta > 0.0) {
            return bad("lr_meta must be positive");
        }
        if self.batch_size == 0 || self.episodes_per_env == 0 {
            return bad("batch_size and episodes_per_env must be at least 1");
        }
        if self.n_shots == 0 || self.n_query == 0 {
            return bad("n_shots and n_query must be at least 1");
        }
        Ok(())
    }

    /// Episodes in one training run over `n_envs` environments.
    pub fn total_episodes(&self, n_envs: usize) -> usize {
        self.epochs * self.episodes_per_env * n_envs
    }
}

/// One training episode's losses; `meta_loss` is absent when the meta step is frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub episode: usize,
    pub env_id: u32,
    pub inner_loss: f64,
    pub meta_loss: Option<f64>,
}

/// Support and query tensors of an episode, cast to the model precision.
#[allow(clippy::type_complexity)]
pub fn episode_tensors<T: Scalar>(
    data: &Dataset,
    ep: &Episode,
) -> Result<(Vec<Vec<Tensor<T>>>, Vec<(Tensor<T>, usize)>)> {
    let env = data
        .environment(ep.env_id)
        .ok_or_else(|| Error::Sampling(format!("no environment {}", ep.env_id)))?;
    let support = ep
        .support
        .iter()
        .map(|obs| obs.iter().map(|&o| env.observations[o].values.cast()).collect())
        .collect();
    let query = ep
        .query
        .iter()
        .map(|&(o, c)| (env.observations[o].values.cast(), c))
        .collect();
    Ok((support, query))
}

/// Support and query tensors handed to a training step.
pub struct EpisodeBatch<T> {
    pub epoch: usize,
    pub env_id: u32,
    pub support: Vec<Vec<Tensor<T>>>,
    pub query: Vec<(Tensor<T>, usize)>,
}

impl<T> EpisodeBatch<T> {
    pub fn support_refs(&self) -> Vec<Vec<&Tensor<T>>> {
        self.support.iter().map(|s| s.iter().collect()).collect()
    }

    pub fn query_refs(&self) -> Vec<(&Tensor<T>, usize)> {
        self.query.iter().map(|(x, c)| (x, *c)).collect()
    }

    /// `(tensor, label)` for every support observation, class-major.
    pub fn support_pairs(&self) -> Vec<(&Tensor<T>, usize)> {
        self.support
            .iter()
            .enumerate()
            .flat_map(|(c, shots)| shots.iter().map(move |x| (x, c)))
            .collect()
    }
}

/// Drives the episode schedule: every epoch visits each training environment
/// `episodes_per_env` times in shuffled minibatches of `batch_size`, and `step`
/// runs once per sampled episode, returning `(inner_loss, meta_loss)`.
pub fn run_schedule<T: Scalar>(
    data: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
    mut step: impl FnMut(&EpisodeBatch<T>) -> Result<(f64, Option<f64>)>,
    mut on_record: impl FnMut(&LossRecord),
) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    let env_ids = data.env_ids();
    if env_ids.is_empty() {
        return Err(Error::Sampling("no training environments".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, TRAIN_STREAM));
    let mut trace = Vec::with_capacity(cfg.total_episodes(env_ids.len()));
    for epoch in 0..cfg.epochs {
        let mut order: Vec<u32> = env_ids
            .iter()
            .flat_map(|&e| std::iter::repeat_n(e, cfg.episodes_per_env))
            .collect();
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            for &env_id in batch {
                let ep = sample_episode(data, env_id, cfg.n_shots, cfg.n_query, &mut rng)?;
                let (support, query) = episode_tensors::<T>(data, &ep)?;
                let batch = EpisodeBatch {
                    epoch,
                    env_id,
                    support,
                    query,
                };
                let (inner_loss, meta_loss) = step(&batch)?;
                if !inner_loss.is_finite() || meta_loss.is_some_and(|l| !l.is_finite()) {
                    return Err(Error::NonFinite {
                        context: format!("training loss at epoch {epoch}"),
                    });
                }
                let rec = LossRecord {
                    epoch,
                    episode: trace.len(),
                    env_id,
                    inner_loss,
                    meta_loss,
                };
                on_record(&rec);
                trace.push(rec);
            }
        }
    }
    Ok(trace)
}

/// Episodic training in place: one inner step on the support loss, then
/// (unless frozen) one meta step on the query loss.
pub fn train<T: Scalar>(
    model: &mut RfNet<T>,
    data: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
    on_record: impl FnMut(&LossRecord),
) -> Result<Vec<LossRecord>> {
    if data.num_classes != model.num_classes() {
        return Err(Error::Config(format!(
            "dataset has {} classes, model {}",
            data.num_classes,
            model.num_classes()
        )));
    }
    let mut inner = AdamState::new(cfg.lr_inner);
    let mut meta = AdamState::new(cfg.lr_meta);
    run_schedule(
        data,
        cfg,
        seed,
        |b: &EpisodeBatch<T>| {
            let inner_loss = inner_train_step(model, &mut inner, &b.support_pairs())?;
            let meta_loss = match cfg.meta_update {
                MetaUpdate::Trainable => {
                    let (se, qe) = embed_episode(model, &b.support_refs(), &b.query_refs())?;
                    let se: Vec<Vec<&Embedding<T>>> = se.iter().map(|s| s.iter().collect()).collect();
                    let qe: Vec<(&Embedding<T>, usize)> = qe.iter().map(|(e, c)| (e, *c)).collect();
                    Some(meta_step_on_embeddings(
                        &mut model.store,
                        model.eta,
                        &mut meta,
                        &se,
                        &qe,
                        true,
                    )?)
                }
                MetaUpdate::Frozen => None,
            };
            Ok((inner_loss, meta_loss))
        },
        on_record,
    )
}

/// The `η` used at test time. With `SelfEpisode`, the last shot of every class
/// becomes a pseudo-query against the remaining shots and `η` takes one Adam
/// step on a private copy; the model is never touched.
pub fn adapted_eta<T: Scalar>(
    eta: &Tensor<T>,
    support: &[Vec<&Embedding<T>>],
    adapt: TestAdapt,
    lr_meta: f64,
) -> Result<Tensor<T>> {
    match adapt {
        TestAdapt::None => Ok(eta.clone()),
        TestAdapt::SelfEpisode => {
            if support.iter().any(|s| s.len() < 2) {
                return Err(Error::Episode("self_episode adaptation needs at least 2 shots".into()));
            }
            let mut store = ParamStore::new();
            let id = store.add("eta", Partition::Meta, eta.clone())?;
            let pseudo_support: Vec<Vec<&Embedding<T>>> = support.iter().map(|s| s[..s.len() - 1].to_vec()).collect();
            let pseudo_query: Vec<(&Embedding<T>, usize)> =
                support.iter().enumerate().map(|(c, s)| (s[s.len() - 1], c)).collect();
            let mut adam = AdamState::new(lr_meta);
            meta_step_on_embeddings(&mut store, id, &mut adam, &pseudo_support, &pseudo_query, true)?;
            Ok(store.value(id).clone())
        }
    }
}
