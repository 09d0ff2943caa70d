//! Synthetic multipath RF observations.
//!
//! A [`Scene`] holds the static reflectors of one environment. Activities add
//! moving paths whose delays follow a [`Trajectory`]. The simulators turn a
//! scene into a `K×L×Nr` magnitude matrix for Wi-Fi CSI, FMCW or impulse radio.

pub mod config;
pub mod dataset;
pub mod scene;
pub mod simulate;

pub use config::{RadioConfig, RadioKind, RadioVariant, DESK_K, DESK_L, DESK_NR};
pub use dataset::{
    build_dataset, build_dataset_with, normalize_datasets, Dataset, DatasetSpec, Environment, NormStats, SignalMatrix,
};
pub use scene::{
    default_class_specs, mix_seed, sample_environment, trajectory_delay, ActivityClassSpec, EnvSpec, Jitter,
    Oscillation, Path, Scene, Trajectory,
};
pub use simulate::{
    pulse_envelope, simulate, simulate_complex, simulate_fmcw, simulate_ir, simulate_wifi, ComplexResponse,
};
