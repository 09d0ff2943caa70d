//! Configuration, file formats, evaluation, cross-validation, reports and the selftest suites.

pub mod config;
pub mod crossval;
pub mod eval;
pub mod io;
pub mod report;
pub mod selftest;

pub use config::{Precision, RunConfig};
pub use crossval::{
    fold_datasets, fold_partition, load_checkpoint_model, load_or_generate, make_checkpoint, mean_std, run_crossval,
    run_crossval_on, train_model, LoadedModel,
};
pub use eval::{embed_dataset, evaluate, evaluate_cached, EpisodeRecord, EvalOptions, EvalResult};
pub use io::{
    decode_checkpoint, decode_dataset, encode_checkpoint, encode_dataset, read_checkpoint, read_dataset,
    write_checkpoint, write_dataset, Checkpoint, CHECKPOINT_MAGIC, DATASET_HEADER_LEN, DATASET_MAGIC,
};
pub use report::{emit_report, parse_metrics_csv, AccuracyCell, MetricsReport, MetricsRow, Summary};
pub use selftest::{run_selftest, SuiteResult};

use crate::error::{Error, Result};

pub const THREADS_ENV: &str = "RF_NET_THREADS";

/// Runs `f` on a pool capped by `RF_NET_THREADS` when that variable is set.
pub fn with_thread_cap<R: Send>(f: impl FnOnce() -> R + Send) -> Result<R> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => {
            let n: usize = v
                .trim()
                .parse()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(format!("cannot build a {n}-thread pool: {e}")))?;
            Ok(pool.install(f))
        }
        Err(_) => Ok(f()),
    }
}
