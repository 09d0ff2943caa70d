//! Channel models for the three radio types.
//!
//! Every simulator produces a `K×L×Nr` tensor of magnitudes. The complex
//! values before the magnitude step are available through [`simulate_complex`]
//! for analytic checks.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::config::{RadioConfig, RadioKind, RadioVariant};
use super::scene::Scene;
use crate::error::{Error, Result};
use crate::numerics::{dft, Tensor};

/// Complex `K×L×Nr` response, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexResponse {
    pub k: usize,
    pub l: usize,
    pub nr: usize,
    pub values: Vec<Complex64>,
}

impl ComplexResponse {
    pub fn get(&self, k: usize, l: usize, r: usize) -> Complex64 {
        self.values[(k * self.l + l) * self.nr + r]
    }

    pub fn magnitude(&self) -> Tensor<f64> {
        let data = self.values.iter().map(|c| c.norm()).collect();
        Tensor::new(vec![self.k, self.l, self.nr], data).expect("shape matches value count")
    }
}

/// Delays of every path at every slow-time instant, checked against `[0, max]`.
fn path_delays(scene: &Scene, cfg: &RadioConfig) -> Result<Vec<Vec<f64>>> {
    let max = cfg.max_delay();
    let mut out = Vec::with_capacity(cfg.k);
    for k in 0..cfg.k {
        let t = k as f64 * cfg.slow_time_interval_s;
        let delays: Vec<f64> = scene.paths.iter().map(|p| p.delay(t)).collect();
        if let Some(&bad) = delays.iter().find(|&&d| !(d >= 0.0 && d <= max)) {
            return Err(Error::Config(format!(
                "path delay {bad:e} s at t={t} s outside [0, {max:e}] s for {} fast-time window",
                cfg.variant()
            )));
        }
        out.push(delays);
    }
    Ok(out)
}

/// Each component carries half the noise power.
fn complex_noise(std: f64) -> Result<Option<Normal<f64>>> {
    if std == 0.0 {
        return Ok(None);
    }
    Normal::new(0.0, std / 2f64.sqrt())
        .map(Some)
        .map_err(|e| Error::Config(format!("noise std {std}: {e}")))
}

fn draw(noise: &Option<Normal<f64>>, rng: &mut impl Rng) -> Complex64 {
    match noise {
        Some(n) => Complex64::new(n.sample(rng), n.sample(rng)),
        None => Complex64::new(0.0, 0.0),
    }
}

/// Gaussian envelope of an impulse-radio path at fast time `t`.
pub fn pulse_envelope(cfg: &RadioConfig, amplitude: f64, delay_s: f64, t: f64) -> Option<f64> {
    let t_tx = cfg.pulse_duration()?;
    let std = cfg.pulse_std()?;
    let d = t - 0.5 * t_tx - delay_s;
    Some(amplitude * (-d * d / (2.0 * std * std)).exp())
}

/// Complex response before the magnitude step.
pub fn simulate_complex(scene: &Scene, cfg: &RadioConfig, rng: &mut impl Rng) -> Result<ComplexResponse> {
    cfg.validate()?;
    scene.validate()?;
    let delays = path_delays(scene, cfg)?;
    let noise = complex_noise(scene.noise_std)?;
    let (k, l, nr) = (cfg.k, cfg.l, cfg.nr);
    let mut values = vec![Complex64::new(0.0, 0.0); k * l * nr];
    let perturb: Vec<Vec<(f64, f64)>> = (0..nr)
        .map(|r| (0..scene.paths.len()).map(|p| scene.pair_perturbation(r, p)).collect())
        .collect();
    match cfg.kind {
        RadioKind::WiFi { subcarrier_spacing_hz } => {
            for (kk, taus) in delays.iter().enumerate() {
                for ll in 0..l {
                    let f = cfg.carrier_hz + ll as f64 * subcarrier_spacing_hz;
                    for r in 0..nr {
                        let mut h = Complex64::new(0.0, 0.0);
                        for (p, path) in scene.paths.iter().enumerate() {
                            let (g, ph) = perturb[r][p];
                            h += Complex64::from_polar(path.amplitude * g, 2.0 * PI * f * taus[p] + ph);
                        }
                        values[(kk * l + ll) * nr + r] = h + draw(&noise, rng);
                    }
                }
            }
        }
        RadioKind::Fmcw { sweep_time_s, .. } => {
            let beta = cfg.chirp_slope().expect("fmcw has a chirp slope");
            let dt = sweep_time_s / l as f64;
            let mut frame = vec![Complex64::new(0.0, 0.0); l];
            for (kk, taus) in delays.iter().enumerate() {
                for r in 0..nr {
                    for (n, s) in frame.iter_mut().enumerate() {
                        let t = n as f64 * dt;
                        let mut v = Complex64::new(0.0, 0.0);
                        for (p, path) in scene.paths.iter().enumerate() {
                            let (g, ph) = perturb[r][p];
                            let tau = taus[p];
                            let phase = 2.0 * PI * (beta * tau * t + cfg.carrier_hz * tau - 0.5 * beta * tau * tau);
                            v += Complex64::from_polar(path.amplitude * g, phase + ph);
                        }
                        *s = v + draw(&noise, rng);
                    }
                    let spec = dft(&frame);
                    for (bin, c) in spec.iter().enumerate() {
                        values[(kk * l + bin) * nr + r] = c / l as f64;
                    }
                }
            }
        }
        RadioKind::Ir { sample_rate_hz, .. } => {
            let t_tx = cfg.pulse_duration().expect("ir has a pulse duration");
            let window = (l - 1) as f64 / sample_rate_hz;
            for (kk, taus) in delays.iter().enumerate() {
                if let Some(&tau) = taus.iter().find(|&&tau| 0.5 * t_tx + tau > window) {
                    return Err(Error::Config(format!(
                        "pulse centre {:e} s lies past the sampled window {window:e} s",
                        0.5 * t_tx + tau
                    )));
                }
                for ll in 0..l {
                    let t = ll as f64 / sample_rate_hz;
                    for r in 0..nr {
                        let mut v = Complex64::new(0.0, 0.0);
                        for (p, path) in scene.paths.iter().enumerate() {
                            let (g, ph) = perturb[r][p];
                            let env = pulse_envelope(cfg, path.amplitude * g, taus[p], t).expect("ir config");
                            v += Complex64::from_polar(env, 2.0 * PI * cfg.carrier_hz * taus[p] + ph);
                        }
                        values[(kk * l + ll) * nr + r] = v + draw(&noise, rng);
                    }
                }
            }
        }
    }
    if values.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
        return Err(Error::NonFinite {
            context: format!("{} simulation", cfg.variant()),
        });
    }
    Ok(ComplexResponse { k, l, nr, values })
}

fn expect_variant(cfg: &RadioConfig, want: RadioVariant) -> Result<()> {
    if cfg.variant() != want {
        return Err(Error::Config(format!(
            "expected a {want} radio config, got {}",
            cfg.variant()
        )));
    }
    Ok(())
}

/// `|Σ_p α_p e^{j2π f_ℓ τ_p(t_k)} + n|` per packet and subcarrier.
pub fn simulate_wifi(scene: &Scene, cfg: &RadioConfig, rng: &mut impl Rng) -> Result<Tensor<f64>> {
    expect_variant(cfg, RadioVariant::WiFi)?;
    Ok(simulate_complex(scene, cfg, rng)?.magnitude())
}

/// Fast-time FFT magnitude of the dechirped beat signal, scaled by `1/L`.
pub fn simulate_fmcw(scene: &Scene, cfg: &RadioConfig, rng: &mut impl Rng) -> Result<Tensor<f64>> {
    expect_variant(cfg, RadioVariant::Fmcw)?;
    Ok(simulate_complex(scene, cfg, rng)?.magnitude())
}

/// Magnitude of superposed Gaussian pulses sampled in fast time.
pub fn simulate_ir(scene: &Scene, cfg: &RadioConfig, rng: &mut impl Rng) -> Result<Tensor<f64>> {
    expect_variant(cfg, RadioVariant::Ir)?;
    Ok(simulate_complex(scene, cfg, rng)?.magnitude())
}

/// Dispatches on the config's variant.
pub fn simulate(scene: &Scene, cfg: &RadioConfig, rng: &mut impl Rng) -> Result<Tensor<f64>> {
    Ok(simulate_complex(scene, cfg, rng)?.magnitude())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::scene::{Oscillation, Path, Trajectory};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scene(paths: Vec<Path>, noise: f64) -> Scene {
        Scene {
            env_id: 0,
            paths,
            noise_std: noise,
            subject_delay_s: 0.0,
            subject_gain: 1.0,
            pair_seed: 0,
            pair_gain_spread: 0.0,
            pair_phase_spread: 0.0,
        }
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(3)
    }

    #[test]
    fn wifi_single_path_is_constant() {
        let cfg = RadioConfig::wifi(8, 16, 2);
        let s = scene(vec![Path::fixed(0.7, 20e-9)], 0.0);
        let m = simulate_wifi(&s, &cfg, &mut rng()).unwrap();
        assert!(m.data().iter().all(|v| (v - 0.7).abs() < 1e-9));
    }

    #[test]
    fn wifi_two_paths_closed_form() {
        let cfg = RadioConfig::wifi(2, 16, 1);
        let (t1, t2) = (10e-9, 47e-9);
        let s = scene(vec![Path::fixed(1.0, t1), Path::fixed(1.0, t2)], 0.0);
        let m = simulate_wifi(&s, &cfg, &mut rng()).unwrap();
        let RadioKind::WiFi { subcarrier_spacing_hz } = cfg.kind else {
            unreachable!()
        };
        for l in 0..16 {
            let f = cfg.carrier_hz + l as f64 * subcarrier_spacing_hz;
            let expect = 2.0 * (PI * f * (t2 - t1)).cos().abs();
            assert!((m.get3(1, l, 0) - expect).abs() < 1e-9, "subcarrier {l}");
        }
    }

    #[test]
    fn wifi_phase_advance_per_subcarrier() {
        let mut cfg = RadioConfig::wifi(1, 8, 1);
        cfg.kind = RadioKind::WiFi {
            subcarrier_spacing_hz: 312.5e3,
        };
        let s = scene(vec![Path::fixed(1.0, 100e-9)], 0.0);
        let c = simulate_complex(&s, &cfg, &mut rng()).unwrap();
        for l in 1..8 {
            let mut d = c.get(0, l, 0).arg() - c.get(0, l - 1, 0).arg();
            if d < 0.0 {
                d += 2.0 * PI;
            }
            assert!((d - 0.19635).abs() < 1e-5, "{d}");
        }
    }

    #[test]
    fn wifi_rejects_delay_beyond_window() {
        let cfg = RadioConfig::wifi(4, 16, 1);
        let s = scene(vec![Path::fixed(1.0, 2e-6)], 0.0);
        assert!(matches!(simulate_wifi(&s, &cfg, &mut rng()), Err(Error::Config(_))));
    }

    fn peak_bin(m: &Tensor<f64>, k: usize) -> usize {
        let (_, l, _) = m.dims3().unwrap();
        (0..l)
            .max_by(|&a, &b| m.get3(k, a, 0).total_cmp(&m.get3(k, b, 0)))
            .unwrap()
    }

    #[test]
    fn fmcw_peak_at_beat_bin() {
        let cfg = RadioConfig::fmcw(2, 256, 1);
        let s = scene(vec![Path::fixed(1.0, 50e-9)], 0.0);
        let m = simulate_fmcw(&s, &cfg, &mut rng()).unwrap();
        assert_eq!(peak_bin(&m, 0), 5);
        assert!((m.get3(0, 5, 0) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn fmcw_zero_delay_is_dc() {
        let cfg = RadioConfig::fmcw(2, 32, 1);
        let s = scene(vec![Path::fixed(1.0, 0.0)], 0.0);
        let m = simulate_fmcw(&s, &cfg, &mut rng()).unwrap();
        assert!((m.get3(0, 0, 0) - 1.0).abs() < 1e-12);
        for b in 1..32 {
            assert!(m.get3(0, b, 0) < 1e-9);
        }
    }

    #[test]
    fn fmcw_rejects_beat_past_nyquist() {
        let cfg = RadioConfig::fmcw(2, 16, 1);
        let s = scene(vec![Path::fixed(1.0, 90e-9)], 0.0);
        assert!(simulate_fmcw(&s, &cfg, &mut rng()).is_err());
    }

    #[test]
    fn ir_argmax_and_one_sigma() {
        let mut cfg = RadioConfig::ir(1, 128, 1);
        cfg.kind = RadioKind::Ir {
            bandwidth_hz: 1e9,
            sample_rate_hz: 10e9,
        };
        let s = scene(vec![Path::fixed(0.8, 5e-9)], 0.0);
        let m = simulate_ir(&s, &cfg, &mut rng()).unwrap();
        let arg = peak_bin(&m, 0);
        assert_eq!(arg, 55);
        let sigma = cfg.pulse_std().unwrap();
        let centre = 5e-9 + 0.5e-9;
        let v = pulse_envelope(&cfg, 0.8, 5e-9, centre + sigma).unwrap();
        assert!((v - 0.8 * (-0.5f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn ir_zero_amplitude_is_zero() {
        let cfg = RadioConfig::ir(4, 16, 2);
        let s = scene(vec![Path::fixed(0.0, 5e-9), Path::fixed(0.0, 20e-9)], 0.0);
        let m = simulate_ir(&s, &cfg, &mut rng()).unwrap();
        assert!(m.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ir_rejects_late_pulse() {
        let cfg = RadioConfig::ir(2, 16, 1);
        let s = scene(vec![Path::fixed(1.0, 59e-9)], 0.0);
        assert!(simulate_ir(&s, &cfg, &mut rng()).is_err());
    }

    #[test]
    fn wrong_variant_rejected() {
        let cfg = RadioConfig::ir(2, 16, 1);
        let s = scene(vec![Path::fixed(1.0, 5e-9)], 0.0);
        assert!(simulate_wifi(&s, &cfg, &mut rng()).is_err());
    }

    #[test]
    fn fmcw_oscillating_path_shows_slow_time_tone() {
        // τ_D moves the carrier phase f_c·τ, so the peak column's slow-time
        // spectrum carries energy at the oscillation frequency
        let k = 64;
        let cfg = RadioConfig::fmcw(k, 32, 1);
        let f_osc = 4.0 * cfg.slow_time_interval_s.recip() / k as f64;
        let path = Path {
            amplitude: 1.0,
            static_delay_s: 50e-9,
            dynamic: Some(Trajectory {
                drift: 0.0,
                oscillations: vec![Oscillation {
                    amplitude_s: 2e-12,
                    freq_hz: f_osc,
                    phase: 0.0,
                }],
            }),
        };
        let s = scene(vec![path], 0.0);
        let c = simulate_complex(&s, &cfg, &mut rng()).unwrap();
        let col: Vec<Complex64> = (0..k).map(|kk| c.get(kk, 5, 0)).collect();
        let spec = crate::numerics::naive_dft(&col);
        let mags: Vec<f64> = spec.iter().map(|z| z.norm()).collect();
        let best = (1..k / 2).max_by(|&a, &b| mags[a].total_cmp(&mags[b])).unwrap();
        assert_eq!(best, 4);
    }

    #[test]
    fn noise_changes_output_and_is_seeded() {
        let cfg = RadioConfig::wifi(4, 8, 1);
        let s = scene(vec![Path::fixed(1.0, 20e-9)], 0.05);
        let a = simulate_wifi(&s, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = simulate_wifi(&s, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let c = simulate_wifi(&s, &cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
