use std::f64::consts::{E, PI};
use std::fmt;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RadioVariant {
    WiFi,
    Fmcw,
    Ir,
}

impl RadioVariant {
    pub fn code(self) -> u8 {
        match self {
            RadioVariant::WiFi => 0,
            RadioVariant::Fmcw => 1,
            RadioVariant::Ir => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(RadioVariant::WiFi),
            1 => Some(RadioVariant::Fmcw),
            2 => Some(RadioVariant::Ir),
            _ => None,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "wifi" | "wi-fi" | "csi" => Some(RadioVariant::WiFi),
            "fmcw" => Some(RadioVariant::Fmcw),
            "ir" | "uwb" => Some(RadioVariant::Ir),
            _ => None,
        }
    }
}

impl fmt::Display for RadioVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RadioVariant::WiFi => "wifi",
            RadioVariant::Fmcw => "fmcw",
            RadioVariant::Ir => "ir",
        })
    }
}

/// Radio-specific physical constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RadioKind {
    /// OFDM CSI; subcarrier `ℓ` (0-based) sits at `f_c + ℓ·Δf`.
    WiFi { subcarrier_spacing_hz: f64 },
    /// Linear chirp of bandwidth `B` over sweep time `T_S`.
    Fmcw { bandwidth_hz: f64, sweep_time_s: f64 },
    /// Gaussian pulse of bandwidth `B`, sampled at `sample_rate_hz` in fast time.
    Ir { bandwidth_hz: f64, sample_rate_hz: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadioConfig {
    pub carrier_hz: f64,
    /// Slow-time count `K`.
    pub k: usize,
    /// Fast-time count `L`.
    pub l: usize,
    /// Tx-rx pair count.
    pub nr: usize,
    pub slow_time_interval_s: f64,
    pub kind: RadioKind,
}

pub const DESK_K: usize = 64;
pub const DESK_L: usize = 16;
pub const DESK_NR: usize = 2;

impl RadioConfig {
    pub fn variant(&self) -> RadioVariant {
        match self.kind {
            RadioKind::WiFi { .. } => RadioVariant::WiFi,
            RadioKind::Fmcw { .. } => RadioVariant::Fmcw,
            RadioKind::Ir { .. } => RadioVariant::Ir,
        }
    }

    /// 5 GHz Wi-Fi with 16 subcarriers spanning 20 MHz.
    pub fn wifi(k: usize, l: usize, nr: usize) -> Self {
        Self {
            carrier_hz: 5.32e9,
            k,
            l,
            nr,
            slow_time_interval_s: 1.0 / 32.0,
            kind: RadioKind::WiFi {
                subcarrier_spacing_hz: 20e6 / DESK_L as f64,
            },
        }
    }

    pub fn fmcw(k: usize, l: usize, nr: usize) -> Self {
        Self {
            carrier_hz: 24e9,
            k,
            l,
            nr,
            slow_time_interval_s: 1.0 / 32.0,
            kind: RadioKind::Fmcw {
                bandwidth_hz: 100e6,
                sweep_time_s: 100e-6,
            },
        }
    }

    /// 100 MHz pulse sampled every 4 ns, so 16 samples cover 64 ns of delay.
    pub fn ir(k: usize, l: usize, nr: usize) -> Self {
        Self {
            carrier_hz: 7.29e9,
            k,
            l,
            nr,
            slow_time_interval_s: 1.0 / 32.0,
            kind: RadioKind::Ir {
                bandwidth_hz: 100e6,
                sample_rate_hz: 250e6,
            },
        }
    }

    pub fn for_variant(variant: RadioVariant, k: usize, l: usize, nr: usize) -> Self {
        match variant {
            RadioVariant::WiFi => Self::wifi(k, l, nr),
            RadioVariant::Fmcw => Self::fmcw(k, l, nr),
            RadioVariant::Ir => Self::ir(k, l, nr),
        }
    }

    pub fn desk(variant: RadioVariant) -> Self {
        Self::for_variant(variant, DESK_K, DESK_L, DESK_NR)
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.k, self.l, self.nr]
    }

    /// `β = B / T_S`.
    pub fn chirp_slope(&self) -> Option<f64> {
        match self.kind {
            RadioKind::Fmcw {
                bandwidth_hz,
                sweep_time_s,
            } => Some(bandwidth_hz / sweep_time_s),
            _ => None,
        }
    }

    /// `T_tx = 1 / B`.
    pub fn pulse_duration(&self) -> Option<f64> {
        match self.kind {
            RadioKind::Ir { bandwidth_hz, .. } => Some(1.0 / bandwidth_hz),
            _ => None,
        }
    }

    /// Pulse standard deviation `1 / (2π B sqrt(log10 e))`.
    pub fn pulse_std(&self) -> Option<f64> {
        match self.kind {
            RadioKind::Ir { bandwidth_hz, .. } => Some(1.0 / (2.0 * PI * bandwidth_hz * E.log10().sqrt())),
            _ => None,
        }
    }

    /// Largest total path delay the fast-time axis can represent.
    pub fn max_delay(&self) -> f64 {
        match self.kind {
            RadioKind::WiFi { subcarrier_spacing_hz } => 1.0 / subcarrier_spacing_hz,
            // β·τ below the fast-time Nyquist rate L / (2 T_S)
            RadioKind::Fmcw { bandwidth_hz, .. } => self.l as f64 / (2.0 * bandwidth_hz),
            RadioKind::Ir { sample_rate_hz, .. } => {
                (self.l.saturating_sub(1)) as f64 / sample_rate_hz - 0.5 * self.pulse_duration().unwrap_or(0.0)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.l == 0 || self.nr == 0 {
            return Err(Error::Config(format!(
                "signal dims must be positive, got K={} L={} Nr={}",
                self.k, self.l, self.nr
            )));
        }
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        };
        positive("carrier frequency", self.carrier_hz)?;
        positive("slow-time interval", self.slow_time_interval_s)?;
        match self.kind {
            RadioKind::WiFi { subcarrier_spacing_hz } => positive("subcarrier spacing", subcarrier_spacing_hz),
            RadioKind::Fmcw {
                bandwidth_hz,
                sweep_time_s,
            } => {
                positive("bandwidth", bandwidth_hz)?;
                positive("sweep time", sweep_time_s)
            }
            RadioKind::Ir {
                bandwidth_hz,
                sample_rate_hz,
            } => {
                positive("bandwidth", bandwidth_hz)?;
                positive("sample rate", sample_rate_hz)
            }
        }
    }
}
