//! Tapped-delay-line Rayleigh channel with a Jakes Doppler spectrum.
//!
//! Each tap and receive antenna fades independently through a sum of
//! `SINUSOIDS` unit-amplitude oscillators whose arrival angles are spread
//! evenly around the circle with a random common offset and random phases.
//! Averaged over realizations this gives the `J₀(2π f_d Δt)` autocorrelation.
//! The frequency response at subcarrier `k` is the tap sum rotated by
//! `exp(-j2π k·Δf·τ_ℓ)`.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phy::Span;

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
pub const SINUSOIDS: usize = 32;
pub const DEFAULT_TAPS: usize = 8;

pub fn doppler_hz(velocity_mps: f64, carrier_hz: f64) -> f64 {
    velocity_mps * carrier_hz / SPEED_OF_LIGHT
}

/// OFDM symbol period including the normal cyclic prefix (14 symbols per slot).
pub fn symbol_duration_s(subcarrier_spacing_hz: f64) -> f64 {
    15.0 / (14.0 * subcarrier_spacing_hz)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TdlProfile {
    pub delays_s: Vec<f64>,
    pub powers: Vec<f64>,
    pub doppler_hz: f64,
}

impl TdlProfile {
    /// Exponentially decaying power-delay profile with `taps` equally spaced
    /// taps, stretched so its RMS delay spread equals `rms_delay_spread_s`.
    pub fn exponential(rms_delay_spread_s: f64, taps: usize, doppler_hz: f64) -> Result<Self> {
        if taps == 0 {
            return Err(Error::Domain("a TDL profile needs at least one tap".into()));
        }
        if rms_delay_spread_s < 0.0 || doppler_hz < 0.0 {
            return Err(Error::Domain(
                "delay spread and Doppler must be non-negative".into(),
            ));
        }
        let decay = (taps as f64 / 4.0).max(0.5);
        let mut powers: Vec<f64> = (0..taps).map(|l| (-(l as f64) / decay).exp()).collect();
        let total: f64 = powers.iter().sum();
        powers.iter_mut().for_each(|p| *p /= total);
        let unit: Vec<f64> = (0..taps).map(|l| l as f64).collect();
        let base = rms_spread(&unit, &powers);
        let stretch = if base > 0.0 { rms_delay_spread_s / base } else { 0.0 };
        Ok(TdlProfile {
            delays_s: unit.iter().map(|d| d * stretch).collect(),
            powers,
            doppler_hz,
        })
    }

    /// A single zero-delay tap: frequency-flat fading.
    pub fn single_tap(doppler_hz: f64) -> Self {
        TdlProfile {
            delays_s: vec![0.0],
            powers: vec![1.0],
            doppler_hz,
        }
    }

    pub fn rms_delay_spread(&self) -> f64 {
        rms_spread(&self.delays_s, &self.powers)
    }

    pub fn validate(&self) -> Result<()> {
        if self.delays_s.is_empty() || self.delays_s.len() != self.powers.len() {
            return Err(Error::Domain("empty or inconsistent TDL profile".into()));
        }
        if (self.powers.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::Domain("tap powers must sum to 1".into()));
        }
        if self.delays_s[0] < 0.0 || self.delays_s.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Domain("tap delays must be non-negative and ascending".into()));
        }
        if !(self.doppler_hz >= 0.0) {
            return Err(Error::Domain("Doppler must be non-negative".into()));
        }
        Ok(())
    }
}

fn rms_spread(delays: &[f64], powers: &[f64]) -> f64 {
    let total: f64 = powers.iter().sum();
    let mean = delays.iter().zip(powers).map(|(d, p)| d * p).sum::<f64>() / total;
    let second = delays.iter().zip(powers).map(|(d, p)| d * d * p).sum::<f64>() / total;
    (second - mean * mean).max(0.0).sqrt()
}

/// Channel frequency response `h[t][f][r]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelRealization {
    pub num_symbols: usize,
    pub num_subcarriers: usize,
    pub num_rx: usize,
    pub h: Vec<Complex64>,
    pub profile: TdlProfile,
    pub seed: u64,
}

impl ChannelRealization {
    pub fn at(&self, t: usize, f: usize, r: usize) -> Complex64 {
        self.h[(t * self.num_subcarriers + f) * self.num_rx + r]
    }
}

struct SosFader {
    doppler_hz: f64,
    cos_angles: [f64; SINUSOIDS],
    phases: [f64; SINUSOIDS],
}

impl SosFader {
    fn new(doppler_hz: f64, rng: &mut impl Rng) -> Self {
        let offset: f64 = rng.random_range(-PI..PI);
        let mut cos_angles = [0.0; SINUSOIDS];
        let mut phases = [0.0; SINUSOIDS];
        for m in 0..SINUSOIDS {
            cos_angles[m] = ((2.0 * PI * m as f64 - PI + offset) / SINUSOIDS as f64).cos();
            phases[m] = rng.random_range(-PI..PI);
        }
        SosFader {
            doppler_hz,
            cos_angles,
            phases,
        }
    }

    fn gain(&self, time_s: f64) -> Complex64 {
        let w = 2.0 * PI * self.doppler_hz * time_s;
        let sum: Complex64 = self
            .cos_angles
            .iter()
            .zip(&self.phases)
            .map(|(c, p)| Complex64::from_polar(1.0, w * c + p))
            .sum();
        sum / (SINUSOIDS as f64).sqrt()
    }
}

/// Samples a realization on a `T×F×N_Rx` grid. Deterministic in `(profile, seed)`.
pub fn generate(
    profile: &TdlProfile,
    num_symbols: usize,
    num_subcarriers: usize,
    num_rx: usize,
    subcarrier_spacing_hz: f64,
    seed: u64,
) -> Result<ChannelRealization> {
    profile.validate()?;
    if !(subcarrier_spacing_hz > 0.0) {
        return Err(Error::Domain(format!(
            "subcarrier spacing must be positive, got {subcarrier_spacing_hz}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ts = symbol_duration_s(subcarrier_spacing_hz);
    let taps = profile.delays_s.len();
    // tap phase ramps across subcarriers, shared by all antennas
    let ramps: Vec<Vec<Complex64>> = profile
        .delays_s
        .iter()
        .zip(&profile.powers)
        .map(|(tau, p)| {
            (0..num_subcarriers)
                .map(|k| Complex64::from_polar(p.sqrt(), -2.0 * PI * k as f64 * subcarrier_spacing_hz * tau))
                .collect()
        })
        .collect();
    let mut h = vec![Complex64::new(0.0, 0.0); num_symbols * num_subcarriers * num_rx];
    for r in 0..num_rx {
        for tap in 0..taps {
            let fader = SosFader::new(profile.doppler_hz, &mut rng);
            for t in 0..num_symbols {
                let g = fader.gain(t as f64 * ts);
                for (k, ramp) in ramps[tap].iter().enumerate() {
                    h[(t * num_subcarriers + k) * num_rx + r] += g * ramp;
                }
            }
        }
    }
    Ok(ChannelRealization {
        num_symbols,
        num_subcarriers,
        num_rx,
        h,
        profile: profile.clone(),
        seed,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CoherenceSummary {
    pub doppler_hz: f64,
    /// `0.423 / f_d`; infinite for a static channel.
    pub coherence_time_s: f64,
    /// `1 / (5·σ_τ)`; infinite for a single-delay profile.
    pub coherence_bandwidth_hz: f64,
    pub rms_delay_spread_s: f64,
}

pub fn coherence_check(profile: &TdlProfile) -> CoherenceSummary {
    let ds = profile.rms_delay_spread();
    CoherenceSummary {
        doppler_hz: profile.doppler_hz,
        coherence_time_s: if profile.doppler_hz > 0.0 {
            0.423 / profile.doppler_hz
        } else {
            f64::INFINITY
        },
        coherence_bandwidth_hz: if ds > 0.0 { 1.0 / (5.0 * ds) } else { f64::INFINITY },
        rms_delay_spread_s: ds,
    }
}

/// Evaluation mobility tiers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum VelocityTier {
    #[serde(rename = "tdl-lo")]
    Low,
    #[serde(rename = "tdl-mid")]
    Medium,
    #[serde(rename = "tdl-hi")]
    High,
    /// Frequency-flat, time-invariant channel.
    #[serde(rename = "flat-static")]
    FlatStatic,
}

impl VelocityTier {
    pub fn name(self) -> &'static str {
        match self {
            VelocityTier::Low => "tdl-lo",
            VelocityTier::Medium => "tdl-mid",
            VelocityTier::High => "tdl-hi",
            VelocityTier::FlatStatic => "flat-static",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        [Self::Low, Self::Medium, Self::High, Self::FlatStatic]
            .into_iter()
            .find(|t| t.name() == name)
    }

    pub fn velocity_range(self) -> Span {
        match self {
            VelocityTier::Low => Span { lo: 0.0, hi: 5.1 },
            VelocityTier::Medium => Span { lo: 10.0, hi: 20.0 },
            VelocityTier::High => Span { lo: 25.0, hi: 40.0 },
            VelocityTier::FlatStatic => Span::point(0.0),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// J₀ by its power series; accurate to ~1e-15 for |x| < 4.
    fn bessel_j0(x: f64) -> f64 {
        let q = -(x * x) / 4.0;
        let mut term = 1.0;
        let mut sum = 1.0;
        for k in 1..40 {
            term *= q / (k * k) as f64;
            sum += term;
        }
        sum
    }

    #[test]
    fn exponential_profile_invariants() {
        let p = TdlProfile::exponential(55e-9, DEFAULT_TAPS, 100.0).unwrap();
        p.validate().unwrap();
        assert!((p.rms_delay_spread() - 55e-9).abs() < 1e-18);
        assert!((p.powers.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(TdlProfile::exponential(55e-9, 0, 0.0).is_err());
    }

    #[test]
    fn static_single_tap_is_constant() {
        let h = generate(&TdlProfile::single_tap(0.0), 14, 24, 2, 30e3, 5).unwrap();
        for r in 0..2 {
            let h0 = h.at(0, 0, r);
            for t in 0..14 {
                for f in 0..24 {
                    assert_eq!(h.at(t, f, r), h0);
                }
            }
        }
        assert_ne!(h.at(0, 0, 0), h.at(0, 0, 1));
    }

    #[test]
    fn single_tap_is_flat_in_frequency() {
        let h = generate(&TdlProfile::single_tap(466.0), 14, 24, 1, 30e3, 6).unwrap();
        for t in 0..14 {
            let m = h.at(t, 0, 0).norm();
            for f in 0..24 {
                assert!((h.at(t, f, 0).norm() - m).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn deterministic_in_seed() {
        let p = TdlProfile::exponential(80e-9, 8, 300.0).unwrap();
        assert_eq!(generate(&p, 14, 24, 2, 30e3, 9).unwrap(), generate(&p, 14, 24, 2, 30e3, 9).unwrap());
        assert_ne!(generate(&p, 14, 24, 2, 30e3, 9).unwrap().h, generate(&p, 14, 24, 2, 30e3, 10).unwrap().h);
    }

    #[test]
    fn rejects_bad_inputs() {
        let empty = TdlProfile {
            delays_s: vec![],
            powers: vec![],
            doppler_hz: 0.0,
        };
        assert!(generate(&empty, 2, 2, 1, 30e3, 0).is_err());
        assert!(generate(&TdlProfile::single_tap(0.0), 2, 2, 1, 0.0, 0).is_err());
    }

    #[test]
    fn unit_average_power() {
        let p = TdlProfile::exponential(100e-9, 8, 200.0).unwrap();
        let mut acc = 0.0;
        let n = 10_000;
        for s in 0..n {
            let h = generate(&p, 1, 1, 1, 30e3, s).unwrap();
            acc += h.h[0].norm_sqr();
        }
        let mean = acc / n as f64;
        assert!((0.95..=1.05).contains(&mean), "{mean}");
    }

    #[test]
    fn time_autocorrelation_follows_bessel() {
        let fd = 400.0;
        let scs = 30e3;
        let ts = symbol_duration_s(scs);
        let p = TdlProfile::single_tap(fd);
        let n = 10_000;
        let lags = 14;
        let mut acc = vec![Complex64::new(0.0, 0.0); lags];
        for s in 0..n {
            let h = generate(&p, lags, 1, 1, scs, 1000 + s).unwrap();
            for (lag, a) in acc.iter_mut().enumerate() {
                *a += h.h[lag] * h.h[0].conj();
            }
        }
        for (lag, a) in acc.iter().enumerate() {
            let dt = lag as f64 * ts;
            if fd * dt > 0.3 {
                continue;
            }
            let est = a.re / n as f64;
            let want = bessel_j0(2.0 * PI * fd * dt);
            assert!((est - want).abs() < 0.05, "lag {lag}: {est} vs {want}");
        }
    }

    #[test]
    fn frequency_correlation_decays_for_multitap() {
        let p = TdlProfile::exponential(300e-9, 8, 0.0).unwrap();
        let n = 4000;
        let mut c1 = 0.0;
        let mut c8 = 0.0;
        for s in 0..n {
            let h = generate(&p, 1, 24, 1, 30e3, s).unwrap();
            c1 += (h.h[1] * h.h[0].conj()).norm();
            c8 += (h.h[20] * h.h[0].conj()).norm();
        }
        assert!(c8 < c1, "{c8} !< {c1}");
    }

    #[test]
    fn coherence_summary() {
        let fd = doppler_hz(40.0, 3.5e9);
        assert!((fd - 466.7).abs() < 0.5, "{fd}");
        let s = coherence_check(&TdlProfile::single_tap(0.0));
        assert_eq!(s.doppler_hz, 0.0);
        assert!(s.coherence_time_s.is_infinite());
        let p = TdlProfile::exponential(100e-9, 8, fd).unwrap();
        let s = coherence_check(&p);
        assert!((s.coherence_bandwidth_hz - 2e6).abs() < 1e-3);
        assert!((s.coherence_time_s - 0.423 / fd).abs() < 1e-15);
    }

    #[test]
    fn tier_names_round_trip() {
        for t in [VelocityTier::Low, VelocityTier::Medium, VelocityTier::High, VelocityTier::FlatStatic] {
            assert_eq!(VelocityTier::from_name(t.name()), Some(t));
        }
        assert_eq!(VelocityTier::High.velocity_range(), Span { lo: 25.0, hi: 40.0 });
    }
}
