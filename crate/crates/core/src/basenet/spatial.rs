//! Spatial feature extraction: signal matrices treated as images.

use rand::Rng;

use super::config::{Backbone, BaseNetConfig, SpatialMode};
use crate::error::{dim_err, Result};
use crate::numerics::{Activation, Conv2d, Dense, Graph, ParamStore, Scalar, Var};

/// Three `3×3` conv + activation + `2×2` max-pool stages, adaptive average
/// pooling onto a fixed grid, then two fully connected layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Cnn5 {
    pub convs: [Conv2d; 3],
    pub fc1: Dense,
    pub fc2: Dense,
    pub grid: (usize, usize),
    pub out_dim: usize,
}

impl Cnn5 {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        channels: [usize; 3],
        hidden: usize,
        grid: (usize, usize),
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let c0 = Conv2d::new(store, &format!("{name}.conv0"), c_in, channels[0], 3, 1, 1, rng)?;
        let c1 = Conv2d::new(store, &format!("{name}.conv1"), channels[0], channels[1], 3, 1, 1, rng)?;
        let c2 = Conv2d::new(store, &format!("{name}.conv2"), channels[1], channels[2], 3, 1, 1, rng)?;
        let flat = channels[2] * grid.0 * grid.1;
        let fc1 = Dense::new(store, &format!("{name}.fc1"), flat, hidden, rng)?;
        let fc2 = Dense::new(store, &format!("{name}.fc2"), hidden, out_dim, rng)?;
        Ok(Self {
            convs: [c0, c1, c2],
            fc1,
            fc2,
            grid,
            out_dim,
        })
    }

    /// `C×H×W` image to a vector of `out_dim`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        image: Var,
        act: Activation,
    ) -> Result<Var> {
        let mut h = image;
        for conv in &self.convs {
            h = conv.forward(g, store, h)?;
            h = g.activation(h, act)?;
            h = g.max_pool2(h)?;
        }
        h = g.adaptive_avg_pool(h, self.grid.0, self.grid.1)?;
        let n = g.value(h).len();
        h = g.reshape(h, &[1, n])?;
        h = self.fc1.forward(g, store, h, Some(act))?;
        h = self.fc2.forward(g, store, h, None)?;
        g.reshape(h, &[self.out_dim])
    }
}

/// Channel-adjust convolution followed by a backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub adjust: Conv2d,
    pub backbone: Cnn5,
}

impl Branch {
    fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        out_dim: usize,
        cfg: &BaseNetConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let adjust = Conv2d::new(
            store,
            &format!("{name}.adjust"),
            c_in,
            cfg.adjust_channels,
            3,
            1,
            1,
            rng,
        )?;
        let Backbone::Cnn5 { channels, hidden } = cfg.backbone;
        let backbone = Cnn5::new(
            store,
            &format!("{name}.cnn"),
            cfg.adjust_channels,
            channels,
            hidden,
            cfg.pool_grid,
            out_dim,
            rng,
        )?;
        Ok(Self { adjust, backbone })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        image: Var,
        act: Activation,
    ) -> Result<Var> {
        let h = self.adjust.forward(g, store, image)?;
        let h = g.activation(h, act)?;
        self.backbone.forward(g, store, h, act)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SpatialModule {
    Fuse { dense: Dense, branch: Branch },
    Separate { time: Branch, freq: Branch },
}

impl SpatialModule {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        cfg: &BaseNetConfig,
        shape: [usize; 3],
        rng: &mut R,
    ) -> Result<Self> {
        let [_, l, nr] = shape;
        let a = cfg.alpha;
        match cfg.spatial_mode {
            SpatialMode::Fuse => {
                let dense = Dense::new(store, "spatial.fuse_dense", 2 * nr * l, 2 * a, rng)?;
                let branch = Branch::new(store, "spatial", 2, 2 * a, cfg, rng)?;
                Ok(SpatialModule::Fuse { dense, branch })
            }
            SpatialMode::Separate => {
                let time = Branch::new(store, "spatial.time", nr, a, cfg, rng)?;
                let freq = Branch::new(store, "spatial.freq", nr, a, cfg, rng)?;
                Ok(SpatialModule::Separate { time, freq })
            }
        }
    }

    /// `x`, `x_f` are `K×L×Nr`; returns `H_spat` of length `2α`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        x_f: Var,
        alpha: usize,
        act: Activation,
    ) -> Result<Var> {
        let (k, l, nr) = g.value(x).dims3()?;
        if g.shape(x_f) != g.shape(x) {
            return dim_err(format!(
                "spectrum shape {:?} differs from signal shape {:?}",
                g.shape(x_f),
                g.shape(x)
            ));
        }
        match self {
            SpatialModule::Fuse { dense, branch } => {
                // K×L×2Nr: the pair axis of x followed by that of x_f.
                let xt = g.reshape(x, &[k * l, nr])?;
                let xt = g.transpose(xt)?;
                let ft = g.reshape(x_f, &[k * l, nr])?;
                let ft = g.transpose(ft)?;
                let both = g.concat(&[xt, ft])?;
                let both = g.reshape(both, &[2 * nr, k * l])?;
                let both = g.transpose(both)?;
                let rows = g.reshape(both, &[k, l * 2 * nr])?;
                let h = dense.forward(g, store, rows, Some(act))?;
                let h = g.reshape(h, &[k, alpha, 2])?;
                let image = g.permute3(h, [2, 1, 0])?;
                branch.forward(g, store, image, act)
            }
            SpatialModule::Separate { time, freq } => {
                let xi = g.permute3(x, [2, 1, 0])?;
                let fi = g.permute3(x_f, [2, 1, 0])?;
                let a = time.forward(g, store, xi, act)?;
                let b = freq.forward(g, store, fi, act)?;
                g.concat(&[a, b])
            }
        }
    }
}
