//! Labeled datasets of simulated observations and z-score normalization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::RadioConfig;
use super::scene::{mix_seed, sample_environment, ActivityClassSpec, EnvSpec};
use super::simulate::simulate;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// One `K×L×Nr` magnitude observation.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalMatrix {
    pub values: Tensor<f32>,
    pub label: usize,
    pub env_id: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Environment {
    pub env_id: u32,
    pub observations: Vec<SignalMatrix>,
}

impl Environment {
    /// Observation indices grouped by class.
    pub fn by_class(&self, num_classes: usize) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); num_classes];
        for (i, o) in self.observations.iter().enumerate() {
            if o.label < num_classes {
                out[o.label].push(i);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub radio: RadioConfig,
    pub num_classes: usize,
    pub environments: Vec<Environment>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.environments.iter().map(|e| e.observations.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn env_ids(&self) -> Vec<u32> {
        self.environments.iter().map(|e| e.env_id).collect()
    }

    pub fn environment(&self, env_id: u32) -> Option<&Environment> {
        self.environments.iter().find(|e| e.env_id == env_id)
    }

    pub fn observations(&self) -> impl Iterator<Item = &SignalMatrix> {
        self.environments.iter().flat_map(|e| e.observations.iter())
    }

    /// Fewest observations of any class in any environment.
    pub fn min_obs_per_class(&self) -> usize {
        self.environments
            .iter()
            .flat_map(|e| e.by_class(self.num_classes).into_iter().map(|v| v.len()))
            .min()
            .unwrap_or(0)
    }

    /// Copy restricted to the given environments, in the given order.
    pub fn subset(&self, env_ids: &[u32]) -> Result<Dataset> {
        let environments = env_ids
            .iter()
            .map(|&id| {
                self.environment(id)
                    .cloned()
                    .ok_or_else(|| Error::Config(format!("dataset has no environment {id}")))
            })
            .collect::<Result<_>>()?;
        Ok(Dataset {
            radio: self.radio,
            num_classes: self.num_classes,
            environments,
        })
    }

    /// Shape, label-range and finiteness checks, plus the support+query feasibility floor.
    pub fn validate(&self, n_shots: usize) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        let shape = self.radio.shape();
        for o in self.observations() {
            if o.values.shape() != shape {
                return Err(Error::ShapeMismatch(format!(
                    "observation shape {:?} != radio shape {shape:?}",
                    o.values.shape()
                )));
            }
            if o.label >= self.num_classes {
                return Err(Error::Config(format!(
                    "label {} out of range for {} classes",
                    o.label, self.num_classes
                )));
            }
            o.values
                .ensure_finite(&format!("observation in environment {}", o.env_id))?;
        }
        let min = self.min_obs_per_class();
        if min < n_shots + 1 {
            return Err(Error::Config(format!(
                "every environment needs at least {} observations per class, found {min}",
                n_shots + 1
            )));
        }
        Ok(())
    }
}

/// Everything needed to regenerate a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub radio: RadioConfig,
    pub n_envs: usize,
    pub class_specs: Vec<ActivityClassSpec>,
    pub obs_per_class: usize,
    pub env_spec: EnvSpec,
    pub seed: u64,
}

const NOISE_STREAM: u64 = 0x006e_6f69_7365;

/// Simulates `n_envs × classes × obs_per_class` observations with the default
/// environment ranges, shrunk to the radio's delay window when necessary.
pub fn build_dataset(
    radio: &RadioConfig,
    n_envs: usize,
    class_specs: &[ActivityClassSpec],
    obs_per_class: usize,
    master_seed: u64,
) -> Result<Dataset> {
    build_dataset_with(&DatasetSpec {
        radio: *radio,
        n_envs,
        class_specs: class_specs.to_vec(),
        obs_per_class,
        env_spec: EnvSpec::default().fit_to(radio.max_delay()),
        seed: master_seed,
    })
}

pub fn build_dataset_with(spec: &DatasetSpec) -> Result<Dataset> {
    spec.radio.validate()?;
    if spec.n_envs < 2 {
        return Err(Error::Config(format!(
            "need at least 2 environments, got {}",
            spec.n_envs
        )));
    }
    if spec.class_specs.len() < 2 {
        return Err(Error::Config(format!(
            "need at least 2 classes, got {}",
            spec.class_specs.len()
        )));
    }
    if spec.obs_per_class == 0 {
        return Err(Error::Config("obs_per_class must be positive".into()));
    }
    for c in &spec.class_specs {
        c.validate(spec.radio.slow_time_interval_s)?;
    }
    let radio = spec.radio;
    let environments = (0..spec.n_envs)
        .into_par_iter()
        .map(|e| {
            let env_id = e as u32;
            let env_seed = mix_seed(spec.seed, e as u64);
            let scene = sample_environment(env_seed, env_id, &spec.env_spec)?;
            let mut observations = Vec::with_capacity(spec.class_specs.len() * spec.obs_per_class);
            for (label, class) in spec.class_specs.iter().enumerate() {
                for i in 0..spec.obs_per_class {
                    let obs_seed = mix_seed(env_seed, ((label as u64) << 32) | i as u64);
                    let s = scene.with_activity(class, obs_seed);
                    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(obs_seed, NOISE_STREAM));
                    let values = simulate(&s, &radio, &mut rng)?.cast::<f32>();
                    values.ensure_finite("simulated observation")?;
                    observations.push(SignalMatrix { values, label, env_id });
                }
            }
            Ok(Environment { env_id, observations })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        radio,
        num_classes: spec.class_specs.len(),
        environments,
    })
}

/// Global scalar z-score statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

impl NormStats {
    pub const IDENTITY: NormStats = NormStats { mean: 0.0, std: 1.0 };

    pub fn fit(data: &Dataset) -> Result<Self> {
        let n = data.observations().map(|o| o.values.len()).sum::<usize>();
        if n == 0 {
            return Err(Error::Config("cannot fit normalization on an empty dataset".into()));
        }
        let mean = data
            .observations()
            .flat_map(|o| o.values.data().iter())
            .map(|&v| v as f64)
            .sum::<f64>()
            / n as f64;
        let var = data
            .observations()
            .flat_map(|o| o.values.data().iter())
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / n as f64;
        let mut std = var.sqrt();
        if !(std > 0.0) {
            log::warn!("training data has zero variance; using std = 1");
            std = 1.0;
        }
        Ok(Self { mean, std })
    }

    pub fn apply_tensor(&self, t: &Tensor<f32>) -> Tensor<f32> {
        let (m, s) = (self.mean, self.std);
        t.map(|v| ((v as f64 - m) / s) as f32)
    }

    pub fn invert_tensor(&self, t: &Tensor<f32>) -> Tensor<f32> {
        let (m, s) = (self.mean, self.std);
        t.map(|v| (v as f64 * s + m) as f32)
    }

    pub fn apply(&self, data: &mut Dataset) {
        for e in &mut data.environments {
            for o in &mut e.observations {
                o.values = self.apply_tensor(&o.values);
            }
        }
    }

    pub fn invert(&self, data: &mut Dataset) {
        for e in &mut data.environments {
            for o in &mut e.observations {
                o.values = self.invert_tensor(&o.values);
            }
        }
    }
}

/// Fits statistics on `train` and applies them to `train` and every dataset in `others`.
pub fn normalize_datasets(train: &mut Dataset, others: &mut [&mut Dataset]) -> Result<NormStats> {
    let stats = NormStats::fit(train)?;
    stats.apply(train);
    for d in others.iter_mut() {
        stats.apply(d);
    }
    Ok(stats)
}
