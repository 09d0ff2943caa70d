//! Release-gate suites: gradients, a mutation check on the gradient suite,
//! FFT oracle, loss-Hessian PSD draws, single-path signal analytics and file
//! round trips.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::io::{decode_checkpoint, decode_dataset, encode_checkpoint, encode_dataset, Checkpoint};
use crate::basenet::{bilinear_attention, Backbone, BaseNetConfig, SpatialMode};
use crate::error::Result;
use crate::meta::{full_episode_loss, loss_hessian, min_eigenvalue, RfNet};
use crate::numerics::{
    dft, finite_diff_check, naive_dft, Activation, BackwardFault, Conv2d, Dense, GradCheckOptions, GradCheckReport,
    Graph, Lstm, ParamId, ParamStore, Tensor, Var,
};
use crate::signal::{
    build_dataset, default_class_specs, simulate_complex, simulate_fmcw, simulate_ir, RadioConfig, RadioKind, Scene,
};

/// Outcome of one suite.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

pub const GRAD_TOLERANCE: f64 = 1e-4;

type LossFn = Box<dyn Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>>;

fn jitter<R: Rng>(store: &mut ParamStore<f64>, rng: &mut R) {
    // keeps pre-activations away from exact ReLU kinks
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
}

fn random_tensor<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Named gradient-check cases as (store, loss).
fn grad_cases(seed: u64) -> Result<Vec<(&'static str, ParamStore<f64>, LossFn)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases: Vec<(&'static str, ParamStore<f64>, LossFn)> = Vec::new();

    let mut s = ParamStore::new();
    let dense = Dense::new(&mut s, "dense", 4, 5, &mut rng)?;
    jitter(&mut s, &mut rng);
    let x = random_tensor(&[3, 4], &mut rng);
    cases.push((
        "dense",
        s,
        Box::new(move |g, st| {
            let xv = g.constant(x.clone())?;
            let y = dense.forward(g, st, xv, Some(Activation::Tanh))?;
            let sq = g.mul(y, y)?;
            g.sum_all(sq)
        }),
    ));

    let mut s = ParamStore::new();
    let conv = Conv2d::new(&mut s, "conv", 2, 3, 3, 1, 1, &mut rng)?;
    jitter(&mut s, &mut rng);
    let x = random_tensor(&[2, 5, 4], &mut rng);
    cases.push((
        "conv2d+relu+pool",
        s,
        Box::new(move |g, st| {
            let xv = g.constant(x.clone())?;
            let y = conv.forward(g, st, xv)?;
            let y = g.activation(y, Activation::Relu)?;
            let y = g.max_pool2(y)?;
            let y = g.adaptive_avg_pool(y, 2, 2)?;
            let sq = g.mul(y, y)?;
            g.sum_all(sq)
        }),
    ));

    let mut s = ParamStore::new();
    let lstm = Lstm::new(&mut s, "lstm", 3, 4, &mut rng)?;
    jitter(&mut s, &mut rng);
    let x = random_tensor(&[5, 3], &mut rng);
    cases.push((
        "lstm",
        s,
        Box::new(move |g, st| {
            let xv = g.constant(x.clone())?;
            let h0 = g.constant(Tensor::zeros(&[4]))?;
            let c0 = g.constant(Tensor::zeros(&[4]))?;
            let h = lstm.forward(g, st, xv, h0, c0)?;
            let last = g.row(h, 4)?;
            g.softmax_cross_entropy(last, 2)
        }),
    ));

    let mut s = ParamStore::new();
    let pt = Dense::new(&mut s, "proj_t", 4, 3, &mut rng)?;
    let pf = Dense::new(&mut s, "proj_f", 4, 3, &mut rng)?;
    let w = s.add_uniform("w", &[5, 3], 3, &mut rng)?;
    jitter(&mut s, &mut rng);
    let (ht, hf) = (random_tensor(&[5, 4], &mut rng), random_tensor(&[5, 4], &mut rng));
    cases.push((
        "attention",
        s,
        Box::new(move |g, st| {
            let a = g.constant(ht.clone())?;
            let b = g.constant(hf.clone())?;
            let ta = pt.forward(g, st, a, Some(Activation::Sigmoid))?;
            let tb = pf.forward(g, st, b, Some(Activation::Sigmoid))?;
            let wv = g.param(st, w);
            let att = bilinear_attention(g, ta, tb, wv)?;
            let at = g.transpose(att)?;
            let joint = g.matmul(at, b)?;
            let sq = g.mul(joint, joint)?;
            g.sum_all(sq)
        }),
    ));

    let cfg = BaseNetConfig {
        alpha: 4,
        iota: 3,
        activation: Activation::Relu,
        spatial_mode: SpatialMode::Fuse,
        backbone: Backbone::Cnn5 {
            channels: [2, 3, 4],
            hidden: 5,
        },
        adjust_channels: 2,
        pool_grid: (2, 2),
        num_classes: 2,
    };
    let mut model = RfNet::<f64>::new(&cfg, [8, 4, 1], seed)?;
    jitter(&mut model.store, &mut rng);
    let xs: Vec<Tensor<f64>> = (0..4).map(|_| random_tensor(&[8, 4, 1], &mut rng)).collect();
    let (net, eta) = (model.net.clone(), model.eta);
    cases.push((
        "rfnet_episode_loss",
        model.store,
        Box::new(move |g, st| {
            full_episode_loss(
                g,
                &net,
                eta,
                st,
                &[vec![&xs[0]], vec![&xs[1]]],
                &[(&xs[2], 0), (&xs[3], 1)],
            )
        }),
    ));
    Ok(cases)
}

fn check_case(store: &mut ParamStore<f64>, loss: &LossFn, fault: Option<BackwardFault>) -> Result<GradCheckReport> {
    let ids: Vec<ParamId> = store.ids().collect();
    let opts = GradCheckOptions {
        max_coords_per_param: Some(6),
        seed: 1,
        fault,
        ..Default::default()
    };
    finite_diff_check(store, &ids, opts, |g, st| loss(g, st))
}

/// Worst relative error per case.
pub fn gradient_errors(seed: u64) -> Result<BTreeMap<&'static str, f64>> {
    let mut out = BTreeMap::new();
    for (name, mut store, loss) in grad_cases(seed)? {
        out.insert(name, check_case(&mut store, &loss, None)?.max_rel_error);
    }
    Ok(out)
}

fn timed(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> SuiteResult {
    let t = Instant::now();
    let (passed, detail) = match f() {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    SuiteResult {
        name,
        passed,
        detail,
        elapsed: t.elapsed(),
    }
}

pub fn gradient_suite() -> SuiteResult {
    timed("numerics.gradients", || {
        let errs = gradient_errors(11)?;
        let worst = errs.values().copied().fold(0.0, f64::max);
        let failing: Vec<String> = errs
            .iter()
            .filter(|(_, &e)| !(e < GRAD_TOLERANCE))
            .map(|(n, e)| format!("{n} ({e:.2e})"))
            .collect();
        if failing.is_empty() {
            Ok((true, format!("{} cases, worst relative error {worst:.2e}", errs.len())))
        } else {
            Ok((false, format!("above {GRAD_TOLERANCE:e}: {}", failing.join(", "))))
        }
    })
}

/// Each injected backward fault must push its case past the tolerance.
pub fn mutation_suite() -> SuiteResult {
    timed("numerics.mutation", || {
        let targets = [
            (BackwardFault::MatMul, "dense"),
            (BackwardFault::Conv2d, "conv2d+relu+pool"),
            (BackwardFault::Activation, "lstm"),
            (BackwardFault::MatMul, "rfnet_episode_loss"),
        ];
        let mut missed = Vec::new();
        for (fault, target) in targets {
            for (name, mut store, loss) in grad_cases(11)? {
                if name == target {
                    let r = check_case(&mut store, &loss, Some(fault))?;
                    if r.max_rel_error < GRAD_TOLERANCE {
                        missed.push(format!("{fault:?} on {name}"));
                    }
                }
            }
        }
        if missed.is_empty() {
            Ok((true, format!("{} injected faults detected", targets.len())))
        } else {
            Ok((false, format!("undetected: {}", missed.join(", "))))
        }
    })
}

pub fn fft_suite() -> SuiteResult {
    timed("numerics.fft", || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut worst: f64 = 0.0;
        for n in 1..=70 {
            let x: Vec<Complex64> = (0..n)
                .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
                .collect();
            let (a, b) = (dft(&x), naive_dft(&x));
            for (p, q) in a.iter().zip(&b) {
                worst = worst.max((p - q).norm());
            }
        }
        Ok((worst < 1e-9, format!("sizes 1..=70, max deviation {worst:.2e}")))
    })
}

/// Smallest eigenvalue over `draws` random `(Λ, β)` for both Hessians.
pub fn hessian_min_eigenvalue(draws: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = f64::INFINITY;
    for _ in 0..draws {
        let nc = rng.random_range(2..=8);
        let m = rng.random_range(1..=4);
        let lambda = DMatrix::from_fn(nc, m, |_, _| rng.random_range(-1.0..=1.0));
        let beta: Vec<f64> = (0..m).map(|_| rng.random_range(-3.0..=3.0)).collect();
        let h = loss_hessian(&lambda, &beta)?;
        worst = worst.min(min_eigenvalue(&h.h_u)).min(min_eigenvalue(&h.h_beta));
    }
    Ok(worst)
}

pub fn hessian_suite() -> SuiteResult {
    timed("meta.hessian_psd", || {
        let worst = hessian_min_eigenvalue(200, 9)?;
        Ok((worst >= -1e-9, format!("200 draws, min eigenvalue {worst:.3e}")))
    })
}

fn peak_bin(m: &Tensor<f64>) -> usize {
    let l = m.shape()[1];
    (0..l)
        .max_by(|&a, &b| m.get3(0, a, 0).total_cmp(&m.get3(0, b, 0)))
        .unwrap_or(0)
}

/// Misses over `n` random delays: FMCW peak bin against `round(β τ T_S)`.
pub fn fmcw_bin_misses(n: usize, seed: u64) -> Result<usize> {
    let cfg = RadioConfig::fmcw(1, 256, 1);
    let RadioKind::Fmcw {
        bandwidth_hz,
        sweep_time_s,
    } = cfg.kind
    else {
        unreachable!()
    };
    let beta = bandwidth_hz / sweep_time_s;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut misses = 0;
    for _ in 0..n {
        let tau = rng.random_range(0.0..0.95 * cfg.max_delay());
        let m = simulate_fmcw(&Scene::single_path(1.0, tau), &cfg, &mut rng)?;
        if peak_bin(&m) != (beta * tau * sweep_time_s).round() as usize {
            misses += 1;
        }
    }
    Ok(misses)
}

/// Largest deviation of the per-subcarrier phase step from `2π Δf τ`, wrapped.
pub fn wifi_phase_slope_error(n: usize, seed: u64) -> Result<f64> {
    let cfg = RadioConfig::wifi(1, 16, 1);
    let RadioKind::WiFi { subcarrier_spacing_hz } = cfg.kind else {
        unreachable!()
    };
    let wrap = |a: f64| (a + PI).rem_euclid(2.0 * PI) - PI;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let tau = rng.random_range(0.0..0.99 * cfg.max_delay());
        let c = simulate_complex(&Scene::single_path(1.0, tau), &cfg, &mut rng)?;
        let expect = 2.0 * PI * subcarrier_spacing_hz * tau;
        for l in 1..cfg.l {
            let step = c.get(0, l, 0).arg() - c.get(0, l - 1, 0).arg();
            worst = worst.max(wrap(step - expect).abs());
        }
    }
    Ok(worst)
}

/// Largest distance in samples between the IR envelope argmax and the pulse centre.
pub fn ir_argmax_offset(n: usize, seed: u64) -> Result<f64> {
    let cfg = RadioConfig::ir(1, 64, 1);
    let RadioKind::Ir { sample_rate_hz, .. } = cfg.kind else {
        unreachable!()
    };
    let t_tx = cfg.pulse_duration().unwrap_or(0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let tau = rng.random_range(0.0..0.95 * cfg.max_delay());
        let m = simulate_ir(&Scene::single_path(1.0, tau), &cfg, &mut rng)?;
        let centre = (0.5 * t_tx + tau) * sample_rate_hz;
        worst = worst.max((peak_bin(&m) as f64 - centre).abs());
    }
    Ok(worst)
}

pub fn signal_suite() -> SuiteResult {
    timed("signal.analytics", || {
        let misses = fmcw_bin_misses(50, 1)?;
        let phase = wifi_phase_slope_error(50, 2)?;
        let ir = ir_argmax_offset(50, 3)?;
        let ok = misses == 0 && phase < 1e-6 && ir <= 1.0;
        Ok((
            ok,
            format!("FMCW bin misses {misses}/50, Wi-Fi phase error {phase:.2e} rad, IR offset {ir:.2} samples"),
        ))
    })
}

pub fn format_suite() -> SuiteResult {
    timed("harness.formats", || {
        let d = build_dataset(&RadioConfig::fmcw(4, 8, 2), 2, &default_class_specs(3), 2, 3)?;
        let same_data = decode_dataset(&encode_dataset(&d)?)? == d;
        let model = RfNet::<f32>::new(
            &BaseNetConfig {
                num_classes: 3,
                ..BaseNetConfig::default()
            },
            [4, 8, 2],
            1,
        )?;
        let ck = Checkpoint {
            metadata: BTreeMap::from([("k".to_string(), "4".to_string())]),
            params: model.store.clone(),
        };
        let same_ck = decode_checkpoint::<f32>(&encode_checkpoint(&ck)?)? == ck;
        Ok((
            same_data && same_ck,
            format!("dataset round trip {same_data}, checkpoint round trip {same_ck}"),
        ))
    })
}

pub fn run_selftest() -> Vec<SuiteResult> {
    vec![
        gradient_suite(),
        mutation_suite(),
        fft_suite(),
        hessian_suite(),
        signal_suite(),
        format_suite(),
    ]
}
