//! Run configuration: line-based `key = value` text with `#` comments.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::baselines::{FineTuneConfig, Method};
use crate::basenet::{Backbone, BaseNetConfig, SpatialMode};
use crate::error::{Error, Result};
use crate::meta::{TestAdapt, TrainConfig};
use crate::numerics::Activation;
use crate::signal::{RadioConfig, RadioVariant, DESK_K, DESK_L, DESK_NR};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" | "32" => Ok(Precision::F32),
            "f64" | "64" => Ok(Precision::F64),
            _ => Err(Error::Config(format!("unknown precision {s:?}; expected f32 or f64"))),
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub radio: RadioVariant,
    pub k: usize,
    pub l: usize,
    pub nr: usize,
    pub envs: usize,
    pub classes: usize,
    /// Observations per environment per class.
    pub obs: usize,
    pub data_seed: u64,
    /// Read the dataset from this file instead of generating it.
    pub data: Option<PathBuf>,
    pub basenet: BaseNetConfig,
    pub train: TrainConfig,
    pub method: Method,
    /// Training fraction when `folds = 1`.
    pub split: f64,
    pub folds: usize,
    pub seeds: Vec<u64>,
    pub shots: Vec<usize>,
    pub eval_episodes: usize,
    pub ft: FineTuneConfig,
    pub precision: Precision,
    /// Skip training and zero both heads, giving a chance-level model.
    pub untrained: bool,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            radio: RadioVariant::WiFi,
            k: DESK_K,
            l: DESK_L,
            nr: DESK_NR,
            envs: 20,
            classes: 6,
            obs: 8,
            data_seed: 0,
            data: None,
            basenet: BaseNetConfig::default(),
            train: TrainConfig::default(),
            method: Method::RfNet,
            split: 0.8,
            folds: 10,
            seeds: vec![0],
            shots: vec![1, 2, 3],
            eval_episodes: 200,
            ft: FineTuneConfig::default(),
            precision: Precision::F32,
            untrained: false,
            out: None,
        }
    }
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| num(key, s))
        .collect()
}

fn bool_of(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

fn join<T: fmt::Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub const KEYS: [&'static str; 37] = [
        "radio",
        "k",
        "l",
        "nr",
        "envs",
        "classes",
        "obs",
        "data_seed",
        "data",
        "alpha",
        "iota",
        "activation",
        "spatial_mode",
        "backbone",
        "channels",
        "hidden",
        "adjust_channels",
        "pool_grid",
        "lr_inner",
        "lr_meta",
        "batch_size",
        "epochs",
        "episodes_per_env",
        "n_query",
        "train_shots",
        "test_adapt",
        "method",
        "split",
        "folds",
        "seeds",
        "shots",
        "eval_episodes",
        "ft_steps",
        "ft_lr",
        "precision",
        "untrained",
        "out",
    ];

    /// Sets one key. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "radio" => {
                self.radio = RadioVariant::parse(v).ok_or_else(|| Error::Config(format!("unknown radio {v:?}")))?
            }
            "k" => self.k = num("k", v)?,
            "l" => self.l = num("l", v)?,
            "nr" => self.nr = num("nr", v)?,
            "envs" => self.envs = num("envs", v)?,
            "classes" => self.classes = num("classes", v)?,
            "obs" => self.obs = num("obs", v)?,
            "data_seed" => self.data_seed = num("data_seed", v)?,
            "data" => self.data = (!v.is_empty()).then(|| PathBuf::from(v)),
            "alpha" => self.basenet.alpha = num("alpha", v)?,
            "iota" => self.basenet.iota = num("iota", v)?,
            "activation" => {
                self.basenet.activation =
                    Activation::parse(v).ok_or_else(|| Error::Config(format!("unknown activation {v:?}")))?
            }
            "spatial_mode" => {
                self.basenet.spatial_mode =
                    SpatialMode::parse(v).ok_or_else(|| Error::Config(format!("unknown spatial mode {v:?}")))?
            }
            "backbone" => {
                let Backbone::Cnn5 { channels, hidden } = self.basenet.backbone.clone();
                Backbone::parse(v)?;
                self.basenet.backbone = Backbone::Cnn5 { channels, hidden };
            }
            "channels" => {
                let c: Vec<usize> = list("channels", v)?;
                let channels: [usize; 3] = c
                    .try_into()
                    .map_err(|_| Error::Config("channels: expected three comma-separated widths".into()))?;
                let Backbone::Cnn5 { hidden, .. } = self.basenet.backbone;
                self.basenet.backbone = Backbone::Cnn5 { channels, hidden };
            }
            "hidden" => {
                let Backbone::Cnn5 { channels, .. } = self.basenet.backbone;
                self.basenet.backbone = Backbone::Cnn5 {
                    channels,
                    hidden: num("hidden", v)?,
                };
            }
            "adjust_channels" => self.basenet.adjust_channels = num("adjust_channels", v)?,
            "pool_grid" => {
                let (h, w) = v
                    .split_once('x')
                    .ok_or_else(|| Error::Config(format!("pool_grid: expected HxW, got {v:?}")))?;
                self.basenet.pool_grid = (num("pool_grid", h.trim())?, num("pool_grid", w.trim())?);
            }
            "lr_inner" => self.train.lr_inner = num("lr_inner", v)?,
            "lr_meta" => self.train.lr_meta = num("lr_meta", v)?,
            "batch_size" => self.train.batch_size = num("batch_size", v)?,
            "epochs" => self.train.epochs = num("epochs", v)?,
            "episodes_per_env" => self.train.episodes_per_env = num("episodes_per_env", v)?,
            "n_query" => self.train.n_query = num("n_query", v)?,
            "train_shots" => self.train.n_shots = num("train_shots", v)?,
            "test_adapt" => self.train.test_adapt = v.parse::<TestAdapt>()?,
            "method" => self.method = v.parse()?,
            "split" => self.split = num("split", v)?,
            "folds" => self.folds = num("folds", v)?,
            "seeds" => self.seeds = list("seeds", v)?,
            "shots" => self.shots = list("shots", v)?,
            "eval_episodes" => self.eval_episodes = num("eval_episodes", v)?,
            "ft_steps" => self.ft.steps = num("ft_steps", v)?,
            "ft_lr" => self.ft.lr = num("ft_lr", v)?,
            "precision" => self.precision = v.parse()?,
            "untrained" => self.untrained = bool_of("untrained", v)?,
            "out" => self.out = (!v.is_empty()).then(|| PathBuf::from(v)),
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("line {}: expected key = value, got {raw:?}", i + 1)))?;
            self.set(k, v).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", i + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse_text(&std::fs::read_to_string(path)?)
    }

    pub fn radio_config(&self) -> RadioConfig {
        RadioConfig::for_variant(self.radio, self.k, self.l, self.nr)
    }

    /// Base network settings with the class count taken from `classes`.
    pub fn basenet_config(&self) -> BaseNetConfig {
        BaseNetConfig {
            num_classes: self.classes,
            ..self.basenet.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.split > 0.0 && self.split < 1.0) {
            return bad(format!("split must lie in (0, 1), got {}", self.split));
        }
        if self.folds == 0 {
            return bad("folds must be at least 1".into());
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        if self.shots.is_empty() || self.shots.contains(&0) {
            return bad("shots must list positive shot counts".into());
        }
        if self.eval_episodes == 0 {
            return bad("eval_episodes must be at least 1".into());
        }
        if !(self.ft.lr.is_finite() && self.ft.lr >= 0.0) {
            return bad("ft_lr must be finite and non-negative".into());
        }
        self.radio_config().validate()?;
        self.basenet_config().validate()?;
        self.train.validate()
    }

    /// Canonical text form; `parse_text(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let Backbone::Cnn5 { channels, hidden } = self.basenet.backbone;
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let pairs: Vec<(&str, String)> = vec![
            ("radio", self.radio.to_string()),
            ("k", self.k.to_string()),
            ("l", self.l.to_string()),
            ("nr", self.nr.to_string()),
            ("envs", self.envs.to_string()),
            ("classes", self.classes.to_string()),
            ("obs", self.obs.to_string()),
            ("data_seed", self.data_seed.to_string()),
            ("data", path(&self.data)),
            ("alpha", self.basenet.alpha.to_string()),
            ("iota", self.basenet.iota.to_string()),
            ("activation", self.basenet.activation.name().to_string()),
            ("spatial_mode", self.basenet.spatial_mode.to_string()),
            ("backbone", self.basenet.backbone.name().to_string()),
            ("channels", join(&channels)),
            ("hidden", hidden.to_string()),
            ("adjust_channels", self.basenet.adjust_channels.to_string()),
            (
                "pool_grid",
                format!("{}x{}", self.basenet.pool_grid.0, self.basenet.pool_grid.1),
            ),
            ("lr_inner", self.train.lr_inner.to_string()),
            ("lr_meta", self.train.lr_meta.to_string()),
            ("batch_size", self.train.batch_size.to_string()),
            ("epochs", self.train.epochs.to_string()),
            ("episodes_per_env", self.train.episodes_per_env.to_string()),
            ("n_query", self.train.n_query.to_string()),
            ("train_shots", self.train.n_shots.to_string()),
            ("test_adapt", self.train.test_adapt.to_string()),
            ("method", self.method.to_string()),
            ("split", self.split.to_string()),
            ("folds", self.folds.to_string()),
            ("seeds", join(&self.seeds)),
            ("shots", join(&self.shots)),
            ("eval_episodes", self.eval_episodes.to_string()),
            ("ft_steps", self.ft.steps.to_string()),
            ("ft_lr", self.ft.lr.to_string()),
            ("precision", self.precision.to_string()),
            ("untrained", self.untrained.to_string()),
            ("out", path(&self.out)),
        ];
        pairs.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.apply_text(
            "seeds = 1, 2,3\nshots=1\n# comment\nlr_meta = 0.05 # trailing\npool_grid = 2x3\nmethod = pn\nout = /tmp/x",
        )
        .unwrap();
        assert_eq!(c.seeds, vec![1, 2, 3]);
        assert_eq!(c.basenet.pool_grid, (2, 3));
        assert_eq!(c.method, Method::ProtoNet);
        let back = RunConfig::parse_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(
            RunConfig::parse_text(&RunConfig::default().to_text()).unwrap(),
            RunConfig::default()
        );
    }

    #[test]
    fn every_key_is_listed_and_settable() {
        let text = RunConfig::default().to_text();
        let keys: Vec<&str> = text.lines().map(|l| l.split('=').next().unwrap().trim()).collect();
        assert_eq!(keys, RunConfig::KEYS.to_vec());
    }

    #[test]
    fn errors() {
        assert!(matches!(RunConfig::parse_text("bogus = 1"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse_text("no equals sign"), Err(Error::Parse(_))));
        assert!(RunConfig::parse_text("folds = x").is_err());
        assert!(RunConfig::parse_text("backbone = resnet18").is_err());
        let c = RunConfig::parse_text("split = 1.0").unwrap();
        assert!(c.validate().is_err());
        let c = RunConfig::parse_text("folds = 0").unwrap();
        assert!(c.validate().is_err());
        assert!(RunConfig::default().validate().is_ok());
    }
}
