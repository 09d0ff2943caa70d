//! Multipath environments and activity-driven delay trajectories.

use std::f64::consts::PI;
use std::ops::RangeInclusive;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// splitmix64 finalizer, used to derive independent child seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One sinusoidal component of a delay trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Oscillation {
    pub amplitude_s: f64,
    pub freq_hz: f64,
    pub phase: f64,
}

/// `τ_D(t) = drift·t + Σ_i amp_i·sin(2π freq_i t + phase_i)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub drift: f64,
    pub oscillations: Vec<Oscillation>,
}

impl Trajectory {
    pub fn delay(&self, t: f64) -> f64 {
        self.drift * t
            + self
                .oscillations
                .iter()
                .map(|o| o.amplitude_s * (2.0 * PI * o.freq_hz * t + o.phase).sin())
                .sum::<f64>()
    }

    /// Upper bound of `|τ_D(t)|` over `[0, horizon]`.
    pub fn max_excursion(&self, horizon: f64) -> f64 {
        self.drift.abs() * horizon + self.oscillations.iter().map(|o| o.amplitude_s.abs()).sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    pub amplitude: f64,
    pub static_delay_s: f64,
    pub dynamic: Option<Trajectory>,
}

impl Path {
    pub fn fixed(amplitude: f64, static_delay_s: f64) -> Self {
        Self {
            amplitude,
            static_delay_s,
            dynamic: None,
        }
    }

    /// `τ_p(t) = τ_S + τ_D(t)`.
    pub fn delay(&self, t: f64) -> f64 {
        self.static_delay_s + self.dynamic.as_ref().map_or(0.0, |d| d.delay(t))
    }
}

/// A multipath environment. Pair 0 is the reference pair; other pairs see
/// per-path gain and phase perturbations derived from `pair_seed`.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub env_id: u32,
    pub paths: Vec<Path>,
    pub noise_std: f64,
    /// Delay of the subject's position, added to every dynamic path.
    pub subject_delay_s: f64,
    /// Gain multiplier for the subject's reflections.
    pub subject_gain: f64,
    pub pair_seed: u64,
    pub pair_gain_spread: f64,
    pub pair_phase_spread: f64,
}

impl Scene {
    /// Noise-free scene with one fixed path and identical pairs.
    pub fn single_path(amplitude: f64, delay_s: f64) -> Self {
        Self {
            env_id: 0,
            paths: vec![Path::fixed(amplitude, delay_s)],
            noise_std: 0.0,
            subject_delay_s: 0.0,
            subject_gain: 1.0,
            pair_seed: 0,
            pair_gain_spread: 0.0,
            pair_phase_spread: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.paths.is_empty() {
            return Err(Error::Config("scene needs at least one path".into()));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Config(format!("noise std {} is negative", self.noise_std)));
        }
        if let Some(p) = self.paths.iter().find(|p| !(p.amplitude >= 0.0)) {
            return Err(Error::Config(format!("path amplitude {} is negative", p.amplitude)));
        }
        Ok(())
    }

    /// Gain and phase offset seen by `pair` on `path`.
    pub fn pair_perturbation(&self, pair: usize, path: usize) -> (f64, f64) {
        if pair == 0 {
            return (1.0, 0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.pair_seed, ((pair as u64) << 32) | path as u64));
        let g = 1.0 + self.pair_gain_spread * rng.random_range(-1.0..=1.0);
        let ph = self.pair_phase_spread * rng.random_range(-1.0..=1.0);
        (g.max(0.0), ph)
    }

    /// Copy of the scene with the subject's dynamic paths for one observation appended.
    pub fn with_activity(&self, spec: &ActivityClassSpec, obs_seed: u64) -> Scene {
        let mut out = self.clone();
        for i in 0..spec.dynamic_paths {
            let (base, traj) = spec.trajectory(obs_seed, i);
            out.paths.push(Path {
                amplitude: self.subject_gain * spec.path_amplitude * 0.6f64.powi(i as i32),
                static_delay_s: self.subject_delay_s + base,
                dynamic: Some(traj),
            });
        }
        out
    }

    pub fn static_delays(&self) -> Vec<f64> {
        self.paths.iter().map(|p| p.static_delay_s).collect()
    }
}

/// Ranges from which environments are drawn.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvSpec {
    pub static_paths: RangeInclusive<usize>,
    pub amplitude: RangeInclusive<f64>,
    pub delay_s: RangeInclusive<f64>,
    pub noise_std: RangeInclusive<f64>,
    pub subject_delay_s: RangeInclusive<f64>,
    pub subject_gain: RangeInclusive<f64>,
    pub pair_gain_spread: f64,
    pub pair_phase_spread: f64,
}

impl Default for EnvSpec {
    fn default() -> Self {
        Self {
            static_paths: 5..=8,
            amplitude: 0.2..=1.0,
            delay_s: 5e-9..=45e-9,
            noise_std: 0.02..=0.05,
            subject_delay_s: 10e-9..=30e-9,
            subject_gain: 0.6..=1.2,
            pair_gain_spread: 0.1,
            pair_phase_spread: 0.5,
        }
    }
}

fn draw_f(rng: &mut ChaCha8Rng, r: &RangeInclusive<f64>) -> f64 {
    if r.start() == r.end() {
        *r.start()
    } else {
        rng.random_range(r.clone())
    }
}

fn check_range(name: &str, r: &RangeInclusive<f64>) -> Result<()> {
    if r.start() > r.end() || !r.start().is_finite() || !r.end().is_finite() {
        return Err(Error::Config(format!("empty range for {name}: {r:?}")));
    }
    Ok(())
}

impl EnvSpec {
    pub fn validate(&self) -> Result<()> {
        if self.static_paths.is_empty() {
            return Err(Error::Config(format!(
                "empty static path count range {:?}",
                self.static_paths
            )));
        }
        check_range("amplitude", &self.amplitude)?;
        check_range("delay", &self.delay_s)?;
        check_range("noise", &self.noise_std)?;
        check_range("subject delay", &self.subject_delay_s)?;
        check_range("subject gain", &self.subject_gain)?;
        if *self.amplitude.start() < 0.0 || *self.noise_std.start() < 0.0 || *self.delay_s.start() < 0.0 {
            return Err(Error::Config(
                "amplitudes, delays and noise must be non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Shrinks the delay ranges so that static and subject paths, plus a 20%
    /// margin for motion, fit within `max_delay_s`.
    pub fn fit_to(&self, max_delay_s: f64) -> Self {
        let needed = self.delay_s.end().max(*self.subject_delay_s.end() + 5e-9);
        let factor = (0.8 * max_delay_s / needed).min(1.0);
        let scale = |r: &RangeInclusive<f64>| r.start() * factor..=r.end() * factor;
        Self {
            delay_s: scale(&self.delay_s),
            subject_delay_s: scale(&self.subject_delay_s),
            ..self.clone()
        }
    }

    /// Zero-width version of every range, pinned at the lower bound.
    pub fn degenerate(&self) -> Self {
        let pin = |r: &RangeInclusive<f64>| *r.start()..=*r.start();
        Self {
            static_paths: *self.static_paths.start()..=*self.static_paths.start(),
            amplitude: pin(&self.amplitude),
            delay_s: pin(&self.delay_s),
            noise_std: pin(&self.noise_std),
            subject_delay_s: pin(&self.subject_delay_s),
            subject_gain: pin(&self.subject_gain),
            pair_gain_spread: 0.0,
            pair_phase_spread: 0.0,
        }
    }
}

/// Draws a deterministic scene from `env_seed`.
pub fn sample_environment(env_seed: u64, env_id: u32, spec: &EnvSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(env_seed);
    let n = if spec.static_paths.start() == spec.static_paths.end() {
        *spec.static_paths.start()
    } else {
        rng.random_range(spec.static_paths.clone())
    };
    let paths = (0..n)
        .map(|_| {
            let a = draw_f(&mut rng, &spec.amplitude);
            let d = draw_f(&mut rng, &spec.delay_s);
            Path::fixed(a, d)
        })
        .collect();
    let noise_std = draw_f(&mut rng, &spec.noise_std);
    let subject_delay_s = draw_f(&mut rng, &spec.subject_delay_s);
    let subject_gain = draw_f(&mut rng, &spec.subject_gain);
    let degenerate = spec.pair_gain_spread == 0.0 && spec.pair_phase_spread == 0.0;
    let pair_seed = if degenerate { 0 } else { rng.random() };
    let scene = Scene {
        env_id,
        paths,
        noise_std,
        subject_delay_s,
        subject_gain,
        pair_seed,
        pair_gain_spread: spec.pair_gain_spread,
        pair_phase_spread: spec.pair_phase_spread,
    };
    scene.validate()?;
    Ok(scene)
}

/// Per-observation relative jitter applied to a class's trajectory parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jitter {
    /// Absolute base-delay jitter (s).
    pub base_delay_s: f64,
    /// Relative amplitude jitter.
    pub amplitude: f64,
    /// Relative frequency jitter.
    pub freq: f64,
    /// Relative drift jitter.
    pub drift: f64,
    /// Maximum random starting phase (rad).
    pub phase: f64,
}

impl Jitter {
    pub const NONE: Jitter = Jitter {
        base_delay_s: 0.0,
        amplitude: 0.0,
        freq: 0.0,
        drift: 0.0,
        phase: 0.0,
    };
}

/// Generative description of one activity.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivityClassSpec {
    pub class_id: usize,
    pub base_delay_s: f64,
    /// `(amplitude_s, freq_hz)` per oscillation.
    pub oscillations: Vec<(f64, f64)>,
    pub drift: f64,
    pub dynamic_paths: usize,
    pub path_amplitude: f64,
    pub jitter: Jitter,
}

impl ActivityClassSpec {
    /// Jittered base delay and trajectory of dynamic path `path` for one observation.
    pub fn trajectory(&self, obs_seed: u64, path: usize) -> (f64, Trajectory) {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(obs_seed, path as u64));
        let j = self.jitter;
        let mut sym = |scale: f64| {
            if scale == 0.0 {
                0.0
            } else {
                scale * rng.random_range(-1.0..=1.0)
            }
        };
        let base = (self.base_delay_s + sym(j.base_delay_s)).max(0.0) + path as f64 * 2e-9;
        let drift = self.drift * (1.0 + sym(j.drift));
        let oscillations = self
            .oscillations
            .iter()
            .map(|&(a, f)| Oscillation {
                amplitude_s: a * (1.0 + sym(j.amplitude)),
                freq_hz: f * (1.0 + sym(j.freq)),
                phase: if j.phase == 0.0 { 0.0 } else { sym(j.phase).abs() },
            })
            .collect();
        (base, Trajectory { drift, oscillations })
    }

    /// Nyquist check against the slow-time sampling interval.
    pub fn validate(&self, slow_time_interval_s: f64) -> Result<()> {
        let nyquist = 0.5 / slow_time_interval_s;
        for &(_, f) in &self.oscillations {
            let fmax = f * (1.0 + self.jitter.freq);
            if fmax >= nyquist {
                return Err(Error::Config(format!(
                    "class {} oscillation {fmax} Hz exceeds slow-time Nyquist {nyquist} Hz",
                    self.class_id
                )));
            }
        }
        Ok(())
    }
}

/// Dynamic delay of the first path of a class for one observation, at time `t`.
pub fn trajectory_delay(spec: &ActivityClassSpec, obs_seed: u64, t: f64) -> f64 {
    spec.trajectory(obs_seed, 0).1.delay(t)
}

/// Six synthetic activities with distinct motion signatures; more classes cycle
/// through the table with shifted rates.
pub fn default_class_specs(n: usize) -> Vec<ActivityClassSpec> {
    const NS: f64 = 1e-9;
    // (base delay, oscillations, drift, dynamic paths)
    let table: [(f64, &[(f64, f64)], f64, usize); 6] = [
        (0.0, &[(0.08 * NS, 0.3)], 0.0, 1),
        (1.0 * NS, &[(0.25 * NS, 1.5)], 0.0, 1),
        (2.0 * NS, &[(0.10 * NS, 2.0)], 1.0 * NS, 1),
        (0.5 * NS, &[(0.50 * NS, 0.5)], 0.0, 2),
        (1.5 * NS, &[(0.30 * NS, 2.5), (0.15 * NS, 5.0)], 0.0, 1),
        (3.0 * NS, &[(0.20 * NS, 0.8)], -0.8 * NS, 2),
    ];
    (0..n)
        .map(|c| {
            let (base, osc, drift, paths) = table[c % table.len()];
            let cycle = (c / table.len()) as f64;
            ActivityClassSpec {
                class_id: c,
                base_delay_s: base,
                oscillations: osc.iter().map(|&(a, f)| (a, f * (1.0 + 0.35 * cycle))).collect(),
                drift,
                dynamic_paths: paths,
                path_amplitude: 0.5,
                jitter: Jitter {
                    base_delay_s: 0.03 * NS,
                    amplitude: 0.15,
                    freq: 0.1,
                    drift: 0.2,
                    phase: 0.5,
                },
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_scene() {
        let s = EnvSpec::default();
        assert_eq!(
            sample_environment(7, 0, &s).unwrap(),
            sample_environment(7, 0, &s).unwrap()
        );
    }

    #[test]
    fn neighbouring_seeds_differ_in_many_delays() {
        let s = EnvSpec::default();
        for seed in 0..20u64 {
            let a = sample_environment(seed, 0, &s).unwrap().static_delays();
            let b = sample_environment(seed + 1, 0, &s).unwrap().static_delays();
            assert!(a.len() >= 5 && b.len() >= 5);
            let differing = a.iter().zip(&b).filter(|(x, y)| x != y).count();
            assert!(differing >= 5, "seed {seed}: {differing}");
        }
    }

    #[test]
    fn degenerate_ranges_give_identical_scenes() {
        let s = EnvSpec::default().degenerate();
        let a = sample_environment(1, 0, &s).unwrap();
        let b = sample_environment(99, 0, &s).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fitting_shrinks_only_when_needed() {
        let s = EnvSpec::default();
        assert_eq!(s.fit_to(1e-6), s);
        let f = s.fit_to(40e-9);
        assert!(*f.delay_s.end() <= 32e-9 + 1e-18);
        assert!(*f.subject_delay_s.end() + 5e-9 <= 32e-9 + 1e-18);
    }

    #[test]
    #[allow(clippy::reversed_empty_ranges)]
    fn empty_range_rejected() {
        let s = EnvSpec {
            delay_s: 5e-9..=1e-9,
            ..EnvSpec::default()
        };
        assert!(matches!(sample_environment(0, 0, &s), Err(Error::Config(_))));
        let s = EnvSpec {
            static_paths: 6..=5,
            ..EnvSpec::default()
        };
        assert!(sample_environment(0, 0, &s).is_err());
    }

    #[test]
    fn zero_motion_means_zero_delay() {
        let spec = ActivityClassSpec {
            class_id: 0,
            base_delay_s: 0.0,
            oscillations: vec![(0.0, 1.0)],
            drift: 0.0,
            dynamic_paths: 1,
            path_amplitude: 1.0,
            jitter: Jitter::NONE,
        };
        for t in [0.0, 0.3, 1.7] {
            assert_eq!(trajectory_delay(&spec, 5, t), 0.0);
        }
    }

    #[test]
    fn quarter_period_of_unit_sinusoid() {
        let traj = Trajectory {
            drift: 0.0,
            oscillations: vec![Oscillation {
                amplitude_s: 1e-9,
                freq_hz: 1.0,
                phase: 0.0,
            }],
        };
        assert!((traj.delay(0.25) - 1e-9).abs() < 1e-24);

        let spec = ActivityClassSpec {
            class_id: 0,
            base_delay_s: 0.0,
            oscillations: vec![(1e-9, 1.0)],
            drift: 0.0,
            dynamic_paths: 1,
            path_amplitude: 1.0,
            jitter: Jitter::NONE,
        };
        assert!((trajectory_delay(&spec, 123, 0.25) - 1e-9).abs() < 1e-24);
    }

    #[test]
    fn no_jitter_means_identical_observations() {
        let mut spec = default_class_specs(6)[4].clone();
        spec.jitter = Jitter::NONE;
        for t in [0.0, 0.4, 1.1] {
            assert_eq!(trajectory_delay(&spec, 1, t), trajectory_delay(&spec, 2, t));
        }
        let jittered = &default_class_specs(6)[4];
        assert_ne!(trajectory_delay(jittered, 1, 0.4), trajectory_delay(jittered, 2, 0.4));
    }

    #[test]
    fn default_specs_respect_nyquist() {
        for s in default_class_specs(12) {
            s.validate(1.0 / 32.0).unwrap();
        }
    }
}
