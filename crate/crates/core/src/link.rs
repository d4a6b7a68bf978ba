//! End-to-end sample generation: LDPC payload, Gray mapping, pilots, fading
//! channel and noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::channel::{self, ChannelRealization, TdlProfile, VelocityTier};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::ldpc::LdpcCode;
use crate::phy::{
    apply_channel, build_grid, snr_to_n0, Constellation, LinkConfig, PilotPattern, ResourceGrid, Span,
};

const PAYLOAD_STREAM: u64 = 1;
const CHANNEL_STREAM: u64 = 2;
const NOISE_STREAM: u64 = 3;

/// Channel conditions for one grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinkDraw {
    pub snr_db: f64,
    pub velocity_mps: f64,
    pub delay_spread_s: f64,
    /// Single zero-delay tap instead of the multi-tap profile.
    pub flat: bool,
}

impl LinkDraw {
    /// Uniform draws from the configured ranges.
    pub fn sample<R: Rng + ?Sized>(cfg: &LinkConfig, rng: &mut R) -> Self {
        Self::sample_ranges(cfg.snr_db, cfg.velocity_mps, cfg.delay_spread_s, false, rng)
    }

    /// Draw for an evaluation tier at a fixed SNR.
    pub fn for_tier<R: Rng + ?Sized>(cfg: &LinkConfig, tier: VelocityTier, snr_db: f64, rng: &mut R) -> Self {
        let flat = tier == VelocityTier::FlatStatic;
        Self::sample_ranges(Span::point(snr_db), tier.velocity_range(), cfg.delay_spread_s, flat, rng)
    }

    fn sample_ranges<R: Rng + ?Sized>(snr: Span, vel: Span, ds: Span, flat: bool, rng: &mut R) -> Self {
        LinkDraw {
            snr_db: snr.sample(rng),
            velocity_mps: vel.sample(rng),
            delay_spread_s: ds.sample(rng),
            flat,
        }
    }

    pub fn profile(&self, cfg: &LinkConfig) -> Result<TdlProfile> {
        let fd = channel::doppler_hz(self.velocity_mps, cfg.carrier_hz);
        if self.flat {
            Ok(TdlProfile::single_tap(fd))
        } else {
            TdlProfile::exponential(self.delay_spread_s, cfg.taps, fd)
        }
    }
}

/// One transmitted and received grid with its ground truth.
#[derive(Clone, Debug)]
pub struct LinkSample {
    pub grid: ResourceGrid,
    pub channel: ChannelRealization,
    pub info: Vec<u8>,
    pub codeword: Vec<u8>,
    pub draw: LinkDraw,
}

/// Immutable link description shared by training and evaluation.
#[derive(Clone, Debug)]
pub struct LinkSimulator {
    cfg: LinkConfig,
    pilots: PilotPattern,
    constellation: Constellation,
    code: LdpcCode,
}

impl LinkSimulator {
    /// Builds the pilot pattern and a rate-1/2 (3,6)-regular code whose
    /// length equals the coded bits carried by one grid.
    pub fn new(cfg: LinkConfig) -> Result<Self> {
        cfg.validate()?;
        if (cfg.code_rate - 0.5).abs() > 0.01 {
            return Err(Error::Config(format!(
                "code rate {} unsupported; the (3,6)-regular code has rate 0.5",
                cfg.code_rate
            )));
        }
        let pilots = PilotPattern::from_config(&cfg)?;
        let constellation = Constellation::new(cfg.modulation_order)?;
        let n = pilots.data_res() * constellation.bits_per_symbol();
        let code = LdpcCode::construct(n, 3, cfg.ldpc_seed)?;
        Ok(LinkSimulator {
            cfg,
            pilots,
            constellation,
            code,
        })
    }

    pub fn config(&self) -> &LinkConfig {
        &self.cfg
    }

    pub fn pilots(&self) -> &PilotPattern {
        &self.pilots
    }

    pub fn constellation(&self) -> &Constellation {
        &self.constellation
    }

    pub fn code(&self) -> &LdpcCode {
        &self.code
    }

    pub fn bits_per_symbol(&self) -> usize {
        self.constellation.bits_per_symbol()
    }

    /// Generates a grid under `draw`. Payload, channel and noise each come
    /// from their own stream derived from `seed`.
    pub fn generate(&self, draw: &LinkDraw, seed: u64) -> Result<LinkSample> {
        let c = &self.cfg;
        let mut payload_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[PAYLOAD_STREAM]));
        let info: Vec<u8> = (0..self.code.k()).map(|_| payload_rng.random_range(0..2u8)).collect();
        let codeword = self.code.encode(&info)?;
        let symbols = self.constellation.map_bits(&codeword)?;
        let x = build_grid(&symbols, &self.pilots)?;
        let profile = draw.profile(c)?;
        let h = channel::generate(
            &profile,
            c.num_symbols,
            c.num_subcarriers,
            c.num_rx,
            c.subcarrier_spacing_hz,
            derive_seed(seed, &[CHANNEL_STREAM]),
        )?;
        let n0 = snr_to_n0(draw.snr_db);
        let mut noise_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[NOISE_STREAM]));
        let y = apply_channel(&x, &h, n0, &mut noise_rng)?;
        let pilot_mask = self.pilots.mask();
        let bps = self.bits_per_symbol();
        let mut bits = vec![0u8; pilot_mask.len() * bps];
        let mut cw = codeword.iter();
        for (re, _) in pilot_mask.iter().enumerate().filter(|(_, &p)| !p) {
            for b in &mut bits[re * bps..(re + 1) * bps] {
                *b = *cw.next().expect("codeword fills the data REs");
            }
        }
        let grid = ResourceGrid {
            num_symbols: c.num_symbols,
            num_subcarriers: c.num_subcarriers,
            num_rx: c.num_rx,
            y,
            x,
            bits,
            pilot_mask,
            n0,
        };
        Ok(LinkSample {
            grid,
            channel: h,
            info,
            codeword,
            draw: *draw,
        })
    }

    /// Data-RE LLRs of a `T×F×bits` array, in codeword order.
    pub fn codeword_llrs(&self, llr: &[f64]) -> Vec<f64> {
        crate::phy::extract_data(llr, &self.pilots.mask(), self.bits_per_symbol())
    }

    /// LDPC-decodes a grid's LLRs and reports whether any information bit is wrong.
    pub fn block_error(&self, llr: &[f64], info: &[u8]) -> Result<bool> {
        let cw = self.codeword_llrs(llr);
        let d = self.code.decode(&cw, crate::ldpc::DEFAULT_MAX_ITER)?;
        Ok(self.code.info_bits(&d.bits) != info)
    }
}
