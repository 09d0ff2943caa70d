//! Metrics report and its CSV/text files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::crossval::mean_std;
use super::eval::EpisodeRecord;
use crate::baselines::Method;
use crate::error::{Error, Result};
use crate::meta::LossRecord;

pub const METRICS_HEADER: &str = "method,fold,seed,shots,accuracy";
pub const EPISODES_HEADER: &str = "method,fold,seed,shots,episode,env_id,correct,total";
pub const LOSS_HEADER: &str = "method,fold,seed,epoch,episode,env_id,inner_loss,meta_loss";

#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyCell {
    pub method: Method,
    pub fold: usize,
    pub seed: u64,
    pub shots: usize,
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRow {
    pub method: Method,
    pub fold: usize,
    pub seed: u64,
    pub record: EpisodeRecord,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossRow {
    pub method: Method,
    pub fold: usize,
    pub seed: u64,
    pub record: LossRecord,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsReport {
    pub cells: Vec<AccuracyCell>,
    pub episodes: Vec<EpisodeRow>,
    pub losses: Vec<LossRow>,
}

/// Mean and spread of one (method, shots) group of accuracy cells.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub method: Method,
    pub shots: usize,
    pub cells: usize,
    pub mean: f64,
    pub std: f64,
}

impl MetricsReport {
    /// Canonical row order: method, fold, seed, shots, then episode.
    pub fn sort(&mut self) {
        self.cells.sort_by_key(|c| (c.method, c.fold, c.seed, c.shots));
        self.episodes
            .sort_by_key(|e| (e.method, e.fold, e.seed, e.record.shots, e.record.episode));
        self.losses
            .sort_by_key(|l| (l.method, l.fold, l.seed, l.record.episode));
    }

    pub fn accuracies(&self, method: Method, shots: usize) -> Vec<f64> {
        self.cells
            .iter()
            .filter(|c| c.method == method && c.shots == shots)
            .map(|c| c.accuracy)
            .collect()
    }

    pub fn mean_accuracy(&self, method: Method, shots: usize) -> f64 {
        mean_std(&self.accuracies(method, shots)).0
    }

    pub fn summaries(&self) -> Vec<Summary> {
        let mut keys: Vec<(Method, usize)> = self.cells.iter().map(|c| (c.method, c.shots)).collect();
        keys.sort_unstable();
        keys.dedup();
        keys.into_iter()
            .map(|(method, shots)| {
                let acc = self.accuracies(method, shots);
                let (mean, std) = mean_std(&acc);
                Summary {
                    method,
                    shots,
                    cells: acc.len(),
                    mean,
                    std,
                }
            })
            .collect()
    }

    pub fn metrics_csv(&self) -> String {
        let mut s = format!("{METRICS_HEADER}\n");
        for c in &self.cells {
            let _ = writeln!(s, "{},{},{},{},{:.6}", c.method, c.fold, c.seed, c.shots, c.accuracy);
        }
        s
    }

    pub fn episodes_csv(&self) -> String {
        let mut s = format!("{EPISODES_HEADER}\n");
        for e in &self.episodes {
            let r = &e.record;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                e.method, e.fold, e.seed, r.shots, r.episode, r.env_id, r.correct, r.total
            );
        }
        s
    }

    pub fn loss_csv(&self) -> String {
        let mut s = format!("{LOSS_HEADER}\n");
        for l in &self.losses {
            let r = &l.record;
            let meta = r.meta_loss.map(|m| format!("{m:.6}")).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{:.6},{}",
                l.method, l.fold, l.seed, r.epoch, r.episode, r.env_id, r.inner_loss, meta
            );
        }
        s
    }

    pub fn summary_text(&self) -> String {
        let mut s = format!(
            "{:<10} {:>5} {:>6} {:>14} {:>8}\n",
            "method", "shots", "cells", "mean_accuracy", "std"
        );
        for m in self.summaries() {
            let _ = writeln!(
                s,
                "{:<10} {:>5} {:>6} {:>14.4} {:>8.4}",
                m.method, m.shots, m.cells, m.mean, m.std
            );
        }
        let episodes: usize = self.cells.iter().map(|c| c.total).sum();
        let _ = writeln!(s, "accuracy cells: {}, query predictions: {episodes}", self.cells.len());
        s
    }
}

/// Writes `metrics.csv`, `episodes.csv`, `loss_trace.csv` and `summary.txt`.
pub fn emit_report(report: &MetricsReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("metrics.csv"), report.metrics_csv())?;
    fs::write(dir.join("episodes.csv"), report.episodes_csv())?;
    fs::write(dir.join("loss_trace.csv"), report.loss_csv())?;
    fs::write(dir.join("summary.txt"), report.summary_text())?;
    Ok(())
}

/// One parsed row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub method: Method,
    pub fold: usize,
    pub seed: u64,
    pub shots: usize,
    pub accuracy: f64,
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Parse("metrics.csv header mismatch".into()));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::Parse(format!("metrics.csv row {}: {line:?}", i + 2));
            if f.len() != 5 {
                return Err(bad());
            }
            Ok(MetricsRow {
                method: f[0].parse()?,
                fold: f[1].parse().map_err(|_| bad())?,
                seed: f[2].parse().map_err(|_| bad())?,
                shots: f[3].parse().map_err(|_| bad())?,
                accuracy: f[4].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}
