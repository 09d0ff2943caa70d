//! Few-shot evaluation over cached embeddings.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::baselines::{predict_episode, FineTuneConfig, Method};
use crate::error::{Error, Result};
use crate::meta::{adapted_eta, sample_episode, Embedding, RfNet, TestAdapt};
use crate::numerics::Scalar;
use crate::signal::{mix_seed, Dataset};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub n_shots: usize,
    pub n_query: usize,
    pub episodes: usize,
    pub seed: u64,
    /// Used only for RF-Net episodes with at least two shots.
    pub test_adapt: TestAdapt,
    pub lr_meta: f64,
    pub ft: FineTuneConfig,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub env_id: u32,
    pub shots: usize,
    pub correct: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub correct: usize,
    pub total: usize,
    pub episodes: Vec<EpisodeRecord>,
}

impl EvalResult {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

/// Embeddings of every observation, indexed like `data.environments`.
pub fn embed_dataset<T: Scalar>(model: &RfNet<T>, data: &Dataset) -> Result<Vec<Vec<Embedding<T>>>> {
    data.environments
        .par_iter()
        .map(|env| {
            env.observations
                .par_iter()
                .map(|o| model.embed(&o.values.cast()))
                .collect::<Result<Vec<_>>>()
        })
        .collect()
}

/// Runs `opts.episodes` seeded episodes; episode `i` draws its environment and
/// its samples from its own generator, so results do not depend on scheduling.
pub fn evaluate_cached<T: Scalar>(
    method: Method,
    model: &RfNet<T>,
    data: &Dataset,
    embeddings: &[Vec<Embedding<T>>],
    opts: &EvalOptions,
) -> Result<EvalResult> {
    if data.environments.is_empty() {
        return Err(Error::Sampling("no evaluation environments".into()));
    }
    if embeddings.len() != data.environments.len() {
        return Err(Error::Dimension("embedding cache does not match the dataset".into()));
    }
    let adapt = if method == Method::RfNet && opts.n_shots >= 2 {
        opts.test_adapt
    } else {
        TestAdapt::None
    };
    let records = (0..opts.episodes)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(opts.seed, i as u64));
            let ei = rng.random_range(0..data.environments.len());
            let env_id = data.environments[ei].env_id;
            let ep = sample_episode(data, env_id, opts.n_shots, opts.n_query, &mut rng)?;
            let cache = &embeddings[ei];
            let support: Vec<Vec<&Embedding<T>>> = ep
                .support
                .iter()
                .map(|s| s.iter().map(|&o| &cache[o]).collect())
                .collect();
            let query: Vec<&Embedding<T>> = ep.query.iter().map(|&(o, _)| &cache[o]).collect();
            let eta = adapted_eta(model.eta_values(), &support, adapt, opts.lr_meta)?;
            let pred = predict_episode(method, model, &eta, &support, &query, opts.ft)?;
            let correct = pred.iter().zip(&ep.query).filter(|(p, (_, c))| *p == c).count();
            Ok(EpisodeRecord {
                episode: i,
                env_id,
                shots: opts.n_shots,
                correct,
                total: ep.query.len(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalResult {
        correct: records.iter().map(|r| r.correct).sum(),
        total: records.iter().map(|r| r.total).sum(),
        episodes: records,
    })
}

pub fn evaluate<T: Scalar>(method: Method, model: &RfNet<T>, data: &Dataset, opts: &EvalOptions) -> Result<EvalResult> {
    let embeddings = embed_dataset(model, data)?;
    evaluate_cached(method, model, data, &embeddings, opts)
}
