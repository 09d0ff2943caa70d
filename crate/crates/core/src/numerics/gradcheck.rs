//! Central-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{BackwardFault, Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::Scalar;
use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Step for `(f(θ+h) − f(θ−h)) / 2h`.
    pub h: f64,
    /// Denominator floor so near-zero gradients are compared absolutely.
    pub floor: f64,
    /// Check at most this many coordinates per parameter (all when `None`).
    pub max_coords_per_param: Option<usize>,
    pub seed: u64,
    /// Corrupts the analytic pass only; used to confirm the check can fail.
    pub fault: Option<BackwardFault>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            floor: 1e-6,
            max_coords_per_param: None,
            seed: 0,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coords_checked: usize,
}

/// Compares the tape gradient of `loss_fn` against central differences.
///
/// `loss_fn` must be deterministic. Parameter values are restored afterwards and
/// all grads are left zeroed.
pub fn finite_diff_check<T, F>(
    store: &mut ParamStore<T>,
    ids: &[ParamId],
    opts: GradCheckOptions,
    loss_fn: F,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &ParamStore<T>) -> Result<Var>,
{
    store.zero_grads();
    let mut g = match opts.fault {
        Some(f) => Graph::with_fault(f),
        None => Graph::new(),
    };
    let loss = loss_fn(&mut g, store)?;
    g.backward_into(loss, store)?;
    let analytic: Vec<Vec<f64>> = ids.iter().map(|&id| store.grad(id).to_f64_vec()).collect();
    store.zero_grads();

    let eval = |store: &ParamStore<T>| -> Result<f64> {
        let mut g = Graph::new();
        let l = loss_fn(&mut g, store)?;
        Ok(g.scalar(l).as_f64())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coords_checked: 0,
    };
    for (pi, &id) in ids.iter().enumerate() {
        let n = store.value(id).len();
        let coords: Vec<usize> = match opts.max_coords_per_param {
            Some(m) if m < n => sample(&mut rng, n, m).into_vec(),
            _ => (0..n).collect(),
        };
        for c in coords {
            let orig = store.value(id).data()[c];
            store.value_mut(id).data_mut()[c] = T::of(orig.as_f64() + opts.h);
            let up = eval(store);
            store.value_mut(id).data_mut()[c] = T::of(orig.as_f64() - opts.h);
            let down = eval(store);
            store.value_mut(id).data_mut()[c] = orig;
            let numeric = (up? - down?) / (2.0 * opts.h);
            let a = analytic[pi][c];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            report.coords_checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((store.get(id).name().to_string(), c));
            }
        }
    }
    Ok(report)
}
