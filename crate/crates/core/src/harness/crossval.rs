//! Environment-level cross-validation and the train/checkpoint plumbing it shares with the CLI.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::{Precision, RunConfig};
use super::eval::{embed_dataset, evaluate_cached, EvalOptions};
use super::io::{read_dataset, Checkpoint};
use super::report::{AccuracyCell, EpisodeRow, LossRow, MetricsReport};
use crate::baselines::{train_method, Method};
use crate::error::{Error, Result};
use crate::meta::{LossRecord, RfNet};
use crate::numerics::Scalar;
use crate::signal::{build_dataset, default_class_specs, mix_seed, normalize_datasets, Dataset, NormStats};

const FOLD_STREAM: u64 = 0x666f_6c64;
const MODEL_STREAM: u64 = 0x006d_6f64_656c;
const EVAL_STREAM: u64 = 0x6576_616c;

/// The configured dataset file, or a freshly generated one.
pub fn load_or_generate(cfg: &RunConfig) -> Result<Dataset> {
    let data = match &cfg.data {
        Some(path) => read_dataset(path)?,
        None => build_dataset(
            &cfg.radio_config(),
            cfg.envs,
            &default_class_specs(cfg.classes),
            cfg.obs,
            cfg.data_seed,
        )?,
    };
    if data.num_classes != cfg.classes {
        return Err(Error::Config(format!(
            "dataset has {} classes but the config asks for {}",
            data.num_classes, cfg.classes
        )));
    }
    Ok(data)
}

/// `(train, test)` environment ids per fold. With one fold the shuffled
/// environments are split by `split`; otherwise they are dealt round-robin
/// into `folds` disjoint test sets.
pub fn fold_partition(env_ids: &[u32], folds: usize, split: f64, seed: u64) -> Result<Vec<(Vec<u32>, Vec<u32>)>> {
    let n = env_ids.len();
    if folds == 0 {
        return Err(Error::Config("folds must be at least 1".into()));
    }
    if n < folds.max(2) {
        return Err(Error::Config(format!("{n} environments cannot fill {folds} folds")));
    }
    let mut ids = env_ids.to_vec();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, FOLD_STREAM)));
    if folds == 1 {
        let n_train = ((n as f64 * split).round() as usize).clamp(1, n - 1);
        let (train, test) = ids.split_at(n_train);
        let (mut train, mut test) = (train.to_vec(), test.to_vec());
        train.sort_unstable();
        test.sort_unstable();
        return Ok(vec![(train, test)]);
    }
    Ok((0..folds)
        .map(|f| {
            let mut test: Vec<u32> = ids
                .iter()
                .enumerate()
                .filter(|(i, _)| i % folds == f)
                .map(|(_, &e)| e)
                .collect();
            let mut train: Vec<u32> = ids
                .iter()
                .enumerate()
                .filter(|(i, _)| i % folds != f)
                .map(|(_, &e)| e)
                .collect();
            train.sort_unstable();
            test.sort_unstable();
            (train, test)
        })
        .collect())
}

/// Normalized train/test subsets of a fold plus the statistics used.
pub fn fold_datasets(data: &Dataset, train_ids: &[u32], test_ids: &[u32]) -> Result<(Dataset, Dataset, NormStats)> {
    if train_ids.iter().any(|e| test_ids.contains(e)) {
        return Err(Error::Config(
            "an environment is in both the training and test sets".into(),
        ));
    }
    let mut train = data.subset(train_ids)?;
    let mut test = data.subset(test_ids)?;
    let norm = normalize_datasets(&mut train, &mut [&mut test])?;
    Ok((train, test, norm))
}

/// Fresh model for `method`, trained unless the config asks for an untrained one.
pub fn train_model<T: Scalar>(
    cfg: &RunConfig,
    method: Method,
    train: &Dataset,
    seed: u64,
) -> Result<(RfNet<T>, Vec<LossRecord>)> {
    let mut model = RfNet::<T>::new(
        &cfg.basenet_config(),
        cfg.radio_config().shape(),
        mix_seed(seed, MODEL_STREAM),
    )?;
    if cfg.untrained {
        model.zero_heads();
        return Ok((model, Vec::new()));
    }
    let trace = train_method(method, &mut model, train, &cfg.train, seed, |r| {
        if r.episode % 50 == 0 {
            log::debug!(
                "{method} episode {} env {} inner loss {:.4}",
                r.episode,
                r.env_id,
                r.inner_loss
            );
        }
    })?;
    Ok((model, trace))
}

/// Methods whose base network follows RF-Net's trajectory: the meta step never
/// touches `Φ`, so when RF-Net is trained anyway RF-Net* is RF-Net with `η`
/// reset to ones and FT uses RF-Net's base network directly.
fn shares_base(m: Method) -> bool {
    matches!(m, Method::RfNet | Method::RfNetStar | Method::FineTune)
}

fn derive<T: Scalar>(trained: &RfNet<T>, method: Method, untrained: bool) -> RfNet<T> {
    let mut m = trained.clone();
    if method == Method::RfNetStar && !untrained {
        let eta = m.eta;
        m.store.value_mut(eta).fill(T::one());
    }
    m
}

struct FoldSeedOutput {
    cells: Vec<AccuracyCell>,
    episodes: Vec<EpisodeRow>,
    losses: Vec<LossRow>,
}

fn run_cell<T: Scalar>(
    cfg: &RunConfig,
    methods: &[Method],
    data: &Dataset,
    fold: usize,
    split: &(Vec<u32>, Vec<u32>),
    seed: u64,
) -> Result<FoldSeedOutput> {
    let (train, test, _) = fold_datasets(data, &split.0, &split.1)?;
    let run_seed = mix_seed(seed, fold as u64);
    let mut out = FoldSeedOutput {
        cells: Vec::new(),
        episodes: Vec::new(),
        losses: Vec::new(),
    };
    let mut shared: Option<RfNet<T>> = None;
    let share = methods.contains(&Method::RfNet);
    for &method in methods {
        let model = if share && shares_base(method) {
            if shared.is_none() {
                let (m, trace) = train_model::<T>(cfg, Method::RfNet, &train, run_seed)?;
                push_losses(&mut out.losses, Method::RfNet, fold, seed, &trace);
                shared = Some(m);
            }
            let base = shared.as_ref().unwrap();
            derive(base, method, cfg.untrained)
        } else {
            let (m, trace) = train_model::<T>(cfg, method, &train, run_seed)?;
            push_losses(&mut out.losses, method, fold, seed, &trace);
            m
        };
        let embeddings = embed_dataset(&model, &test)?;
        for &shots in &cfg.shots {
            let opts = EvalOptions {
                n_shots: shots,
                n_query: cfg.train.n_query,
                episodes: cfg.eval_episodes,
                seed: mix_seed(run_seed, EVAL_STREAM ^ shots as u64),
                test_adapt: cfg.train.test_adapt,
                lr_meta: cfg.train.lr_meta,
                ft: cfg.ft,
            };
            let r = evaluate_cached(method, &model, &test, &embeddings, &opts)?;
            log::info!(
                "{method} fold {fold} seed {seed} {shots}-shot accuracy {:.4}",
                r.accuracy()
            );
            out.cells.push(AccuracyCell {
                method,
                fold,
                seed,
                shots,
                accuracy: r.accuracy(),
                correct: r.correct,
                total: r.total,
            });
            out.episodes.extend(r.episodes.into_iter().map(|record| EpisodeRow {
                method,
                fold,
                seed,
                record,
            }));
        }
    }
    Ok(out)
}

fn push_losses(rows: &mut Vec<LossRow>, method: Method, fold: usize, seed: u64, trace: &[LossRecord]) {
    rows.extend(trace.iter().map(|r| LossRow {
        method,
        fold,
        seed,
        record: r.clone(),
    }));
}

/// Cross-validates several methods on one dataset. Every (fold, seed) pair
/// owns its generator and parameters, so pairs may run concurrently.
pub fn run_crossval_on(cfg: &RunConfig, methods: &[Method], data: &Dataset) -> Result<MetricsReport> {
    cfg.validate()?;
    if methods.is_empty() {
        return Err(Error::Config("no methods to evaluate".into()));
    }
    data.validate(cfg.shots.iter().copied().max().unwrap_or(1))?;
    let splits = fold_partition(&data.env_ids(), cfg.folds, cfg.split, cfg.data_seed)?;
    let jobs: Vec<(usize, u64)> = (0..splits.len())
        .flat_map(|f| cfg.seeds.iter().map(move |&s| (f, s)))
        .collect();
    let outputs = jobs
        .par_iter()
        .map(|&(fold, seed)| match cfg.precision {
            Precision::F32 => run_cell::<f32>(cfg, methods, data, fold, &splits[fold], seed),
            Precision::F64 => run_cell::<f64>(cfg, methods, data, fold, &splits[fold], seed),
        })
        .collect::<Result<Vec<_>>>()?;
    let mut report = MetricsReport::default();
    for o in outputs {
        report.cells.extend(o.cells);
        report.episodes.extend(o.episodes);
        report.losses.extend(o.losses);
    }
    report.sort();
    Ok(report)
}

pub fn run_crossval(cfg: &RunConfig) -> Result<MetricsReport> {
    let data = load_or_generate(cfg)?;
    run_crossval_on(cfg, &[cfg.method], &data)
}

/// Checkpoint holding the parameters, the run config, the method and the
/// input normalization.
pub fn make_checkpoint<T: Scalar>(cfg: &RunConfig, method: Method, model: &RfNet<T>, norm: NormStats) -> Checkpoint<T> {
    let mut metadata = BTreeMap::new();
    for line in cfg.to_text().lines() {
        if let Some((k, v)) = line.split_once('=') {
            metadata.insert(format!("config.{}", k.trim()), v.trim().to_string());
        }
    }
    metadata.insert("method".into(), method.to_string());
    metadata.insert("norm_mean".into(), format!("{:e}", norm.mean));
    metadata.insert("norm_std".into(), format!("{:e}", norm.std));
    Checkpoint {
        metadata,
        params: model.store.clone(),
    }
}

/// A model rebuilt from a checkpoint, with what is needed to evaluate it.
#[derive(Debug, Clone)]
pub struct LoadedModel<T> {
    pub config: RunConfig,
    pub method: Method,
    pub norm: NormStats,
    pub model: RfNet<T>,
}

pub fn load_checkpoint_model<T: Scalar>(ck: &Checkpoint<T>) -> Result<LoadedModel<T>> {
    let mut config = RunConfig::default();
    for (k, v) in &ck.metadata {
        if let Some(key) = k.strip_prefix("config.") {
            config.set(key, v)?;
        }
    }
    let get = |k: &str| {
        ck.metadata
            .get(k)
            .ok_or_else(|| Error::Parse(format!("checkpoint metadata lacks {k}")))
    };
    let method: Method = get("method")?.parse()?;
    let parse_f = |k: &str| -> Result<f64> {
        let v = get(k)?;
        v.parse().map_err(|_| Error::Parse(format!("{k}: cannot parse {v:?}")))
    };
    let norm = NormStats {
        mean: parse_f("norm_mean")?,
        std: parse_f("norm_std")?,
    };
    let mut model = RfNet::<T>::new(&config.basenet_config(), config.radio_config().shape(), 0)?;
    model.store.copy_values_from(&ck.params)?;
    Ok(LoadedModel {
        config,
        method,
        norm,
        model,
    })
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}
