use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::channel::ChannelRealization;
use crate::error::{Error, Result};

/// Closed interval `[lo, hi]`, written as a two-element array in config files.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 2]", into = "[f64; 2]")]
pub struct Span {
    pub lo: f64,
    pub hi: f64,
}

impl Span {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite()) || lo > hi {
            return Err(Error::Config(format!("invalid range [{lo}, {hi}]")));
        }
        Ok(Span { lo, hi })
    }

    pub fn point(v: f64) -> Self {
        Span { lo: v, hi: v }
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.lo == self.hi {
            self.lo
        } else {
            rng.random_range(self.lo..=self.hi)
        }
    }
}

impl TryFrom<[f64; 2]> for Span {
    type Error = Error;
    fn try_from(v: [f64; 2]) -> Result<Self> {
        Span::new(v[0], v[1])
    }
}

impl From<Span> for [f64; 2] {
    fn from(s: Span) -> Self {
        [s.lo, s.hi]
    }
}

/// Link parameters. Defaults are the desk-scale profile.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinkConfig {
    pub num_symbols: usize,
    pub num_subcarriers: usize,
    pub num_rx: usize,
    pub subcarrier_spacing_hz: f64,
    pub carrier_hz: f64,
    pub modulation_order: usize,
    pub code_rate: f64,
    pub pilot_symbols: Vec<usize>,
    pub pilot_seed: u64,
    pub ldpc_seed: u64,
    pub snr_db: Span,
    /// Channel ranges live in their own section of the run configuration.
    #[serde(skip)]
    pub velocity_mps: Span,
    #[serde(skip)]
    pub delay_spread_s: Span,
    #[serde(skip)]
    pub taps: usize,
}

impl Default for LinkConfig {
    fn default() -> Self {
        LinkConfig {
            num_symbols: 14,
            num_subcarriers: 24,
            num_rx: 1,
            subcarrier_spacing_hz: 30e3,
            carrier_hz: 3.5e9,
            modulation_order: 4,
            code_rate: 0.5,
            pilot_symbols: vec![2, 11],
            pilot_seed: 0x5EED_D4A5,
            ldpc_seed: 0x1D9C_0DE5,
            snr_db: Span { lo: 0.0, hi: 15.0 },
            velocity_mps: Span { lo: 0.0, hi: 50.0 },
            delay_spread_s: Span {
                lo: 10e-9,
                hi: 100e-9,
            },
            taps: crate::channel::DEFAULT_TAPS,
        }
    }
}

impl LinkConfig {
    /// Table-scale link: 128 subcarriers, 64-QAM, two receive antennas.
    pub fn paper() -> Self {
        LinkConfig {
            num_subcarriers: 128,
            num_rx: 2,
            modulation_order: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_symbols == 0 || self.num_subcarriers == 0 || self.num_rx == 0 {
            return Err(Error::Config("grid extents and antenna count must be positive".into()));
        }
        if self.subcarrier_spacing_hz <= 0.0 || self.carrier_hz <= 0.0 {
            return Err(Error::Config("subcarrier spacing and carrier must be positive".into()));
        }
        if self.pilot_symbols.is_empty() || self.pilot_symbols.iter().any(|&s| s >= self.num_symbols) {
            return Err(Error::Config(format!(
                "pilot symbols {:?} must be non-empty and inside [0, {})",
                self.pilot_symbols, self.num_symbols
            )));
        }
        if self.taps == 0 {
            return Err(Error::Config("the channel needs at least one tap".into()));
        }
        if self.velocity_mps.lo < 0.0 || self.delay_spread_s.lo < 0.0 {
            return Err(Error::Config("velocity and delay spread must be non-negative".into()));
        }
        if !(0.0 < self.code_rate && self.code_rate < 1.0) {
            return Err(Error::Config(format!("code rate {} outside (0, 1)", self.code_rate)));
        }
        Ok(())
    }

    pub fn data_symbols(&self) -> usize {
        self.num_symbols - self.pilot_symbols.len()
    }

    pub fn data_res(&self) -> usize {
        self.data_symbols() * self.num_subcarriers
    }
}

/// Known reference symbols occupying every subcarrier of the listed OFDM symbols.
#[derive(Clone, Debug, PartialEq)]
pub struct PilotPattern {
    num_symbols: usize,
    num_subcarriers: usize,
    symbols: Vec<usize>,
    values: Vec<Complex64>,
}

impl PilotPattern {
    /// Pilot values are a seeded pseudo-random unit-modulus QPSK sequence.
    pub fn new(symbols: &[usize], num_symbols: usize, num_subcarriers: usize, seed: u64) -> Result<Self> {
        let mut symbols = symbols.to_vec();
        symbols.sort_unstable();
        symbols.dedup();
        if symbols.is_empty() || symbols.iter().any(|&s| s >= num_symbols) {
            return Err(Error::Domain(format!(
                "pilot symbols {symbols:?} invalid for {num_symbols} OFDM symbols"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let values = (0..symbols.len() * num_subcarriers)
            .map(|_| {
                let re = if rng.random::<bool>() { s } else { -s };
                let im = if rng.random::<bool>() { s } else { -s };
                Complex64::new(re, im)
            })
            .collect();
        Ok(PilotPattern {
            num_symbols,
            num_subcarriers,
            symbols,
            values,
        })
    }

    pub fn from_config(cfg: &LinkConfig) -> Result<Self> {
        Self::new(&cfg.pilot_symbols, cfg.num_symbols, cfg.num_subcarriers, cfg.pilot_seed)
    }

    pub fn symbols(&self) -> &[usize] {
        &self.symbols
    }

    pub fn num_symbols(&self) -> usize {
        self.num_symbols
    }

    pub fn num_subcarriers(&self) -> usize {
        self.num_subcarriers
    }

    pub fn is_pilot_symbol(&self, t: usize) -> bool {
        self.symbols.binary_search(&t).is_ok()
    }

    pub fn value(&self, t: usize, f: usize) -> Option<Complex64> {
        self.symbols
            .binary_search(&t)
            .ok()
            .map(|i| self.values[i * self.num_subcarriers + f])
    }

    /// `true` at pilot REs, raster order over (t, f).
    pub fn mask(&self) -> Vec<bool> {
        (0..self.num_symbols)
            .flat_map(|t| std::iter::repeat_n(self.is_pilot_symbol(t), self.num_subcarriers))
            .collect()
    }

    pub fn data_res(&self) -> usize {
        (self.num_symbols - self.symbols.len()) * self.num_subcarriers
    }
}

/// Frequency-domain received grid plus the transmit-side ground truth.
#[derive(Clone, Debug)]
pub struct ResourceGrid {
    pub num_symbols: usize,
    pub num_subcarriers: usize,
    pub num_rx: usize,
    /// `T×F×N_Rx`, raster order.
    pub y: Vec<Complex64>,
    /// `T×F` transmitted symbols.
    pub x: Vec<Complex64>,
    /// `T×F×bits_per_symbol` coded bits; zero at pilot REs.
    pub bits: Vec<u8>,
    pub pilot_mask: Vec<bool>,
    pub n0: f64,
}

impl ResourceGrid {
    pub fn y_at(&self, t: usize, f: usize, r: usize) -> Complex64 {
        self.y[(t * self.num_subcarriers + f) * self.num_rx + r]
    }

    pub fn num_res(&self) -> usize {
        self.num_symbols * self.num_subcarriers
    }

    pub fn bits_per_symbol(&self) -> usize {
        self.bits.len() / self.num_res()
    }
}

/// Places data symbols on non-pilot REs in (t, f) raster order and pilots elsewhere.
pub fn build_grid(data: &[Complex64], pilots: &PilotPattern) -> Result<Vec<Complex64>> {
    if data.len() != pilots.data_res() {
        return Err(Error::Dimension(format!(
            "{} data symbols for {} data REs",
            data.len(),
            pilots.data_res()
        )));
    }
    let mut it = data.iter();
    let mut grid = Vec::with_capacity(pilots.num_symbols * pilots.num_subcarriers);
    for t in 0..pilots.num_symbols {
        for f in 0..pilots.num_subcarriers {
            grid.push(match pilots.value(t, f) {
                Some(p) => p,
                None => *it.next().expect("counted above"),
            });
        }
    }
    Ok(grid)
}

/// Data-RE entries of a `T×F×width` array, in raster order.
pub fn extract_data<T: Copy>(values: &[T], pilot_mask: &[bool], width: usize) -> Vec<T> {
    pilot_mask
        .iter()
        .enumerate()
        .filter(|(_, &p)| !p)
        .flat_map(|(re, _)| values[re * width..(re + 1) * width].iter().copied())
        .collect()
}

/// `y = h·x` with no noise.
pub fn apply_channel_noiseless(x: &[Complex64], h: &ChannelRealization) -> Result<Vec<Complex64>> {
    if x.len() != h.num_symbols * h.num_subcarriers {
        return Err(Error::Shape {
            op: "apply_channel",
            lhs: vec![x.len()],
            rhs: vec![h.num_symbols, h.num_subcarriers, h.num_rx],
        });
    }
    let nr = h.num_rx;
    Ok(h.h.iter().enumerate().map(|(i, hv)| hv * x[i / nr]).collect())
}

/// `y = h·x + n` with `n ~ CN(0, n0)` i.i.d. per antenna and RE.
pub fn apply_channel<R: Rng + ?Sized>(
    x: &[Complex64],
    h: &ChannelRealization,
    n0: f64,
    rng: &mut R,
) -> Result<Vec<Complex64>> {
    if !(n0 > 0.0) {
        return Err(Error::Domain(format!("noise power must be positive, got {n0}")));
    }
    let mut y = apply_channel_noiseless(x, h)?;
    let sd = (n0 / 2.0).sqrt();
    for v in &mut y {
        let re: f64 = StandardNormal.sample(rng);
        let im: f64 = StandardNormal.sample(rng);
        *v += Complex64::new(re * sd, im * sd);
    }
    Ok(y)
}

/// Per-antenna noise power for a per-RE SNR in dB, with unit symbol and channel energy.
pub fn snr_to_n0(snr_db: f64) -> f64 {
    10f64.powf(-snr_db / 10.0)
}
