use std::fmt;

use crate::error::{Error, Result};
use crate::numerics::Activation;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpatialMode {
    /// Concatenate `x` and `x_f` before a single backbone.
    Fuse,
    /// One backbone per input, outputs concatenated.
    Separate,
}

impl SpatialMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fuse" => Some(SpatialMode::Fuse),
            "separate" => Some(SpatialMode::Separate),
            _ => None,
        }
    }
}

impl fmt::Display for SpatialMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SpatialMode::Fuse => "fuse",
            SpatialMode::Separate => "separate",
        })
    }
}

/// Spatial backbone. Only the five-layer CNN is implemented.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Backbone {
    /// Three conv+pool stages and two fully connected layers.
    Cnn5 { channels: [usize; 3], hidden: usize },
}

impl Backbone {
    pub const NAMES: [&'static str; 1] = ["cnn5"];

    /// Known but unimplemented names produce a config error.
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cnn5" => Ok(Backbone::default()),
            other @ ("resnet18" | "vgg" | "vgg16" | "shufflenet" | "alexnet") => {
                Err(Error::Config(format!("backbone {other} is not available; use cnn5")))
            }
            other => Err(Error::Config(format!("unknown backbone {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Backbone::Cnn5 { .. } => "cnn5",
        }
    }
}

impl Default for Backbone {
    fn default() -> Self {
        Backbone::Cnn5 {
            channels: [8, 16, 32],
            hidden: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaseNetConfig {
    /// Hidden width `α`; spatial and composed features have width `2α`.
    pub alpha: usize,
    /// Attention projection width `ι`.
    pub iota: usize,
    pub activation: Activation,
    pub spatial_mode: SpatialMode,
    pub backbone: Backbone,
    /// Output channels of the channel-adjust convolution in front of the backbone.
    pub adjust_channels: usize,
    /// Fixed grid the last feature map is average-pooled onto.
    pub pool_grid: (usize, usize),
    pub num_classes: usize,
}

impl Default for BaseNetConfig {
    fn default() -> Self {
        Self {
            alpha: 32,
            iota: 16,
            activation: Activation::Relu,
            spatial_mode: SpatialMode::Fuse,
            backbone: Backbone::default(),
            adjust_channels: 4,
            pool_grid: (4, 4),
            num_classes: 6,
        }
    }
}

impl BaseNetConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("alpha", self.alpha),
            ("iota", self.iota),
            ("adjust_channels", self.adjust_channels),
            ("pool grid height", self.pool_grid.0),
            ("pool grid width", self.pool_grid.1),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        let Backbone::Cnn5 { channels, hidden } = &self.backbone;
        if channels.contains(&0) || *hidden == 0 {
            return Err(Error::Config("backbone widths must be positive".into()));
        }
        Ok(())
    }
}
