use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baseline::{ls_lmmse_receive, perfect_csi_receive, LmmseConfig};
use crate::channel::VelocityTier;
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::layers::ReceiverModel;
use crate::link::{LinkDraw, LinkSimulator};

/// Points with fewer observed errors than this are flagged as under-sampled.
pub const MIN_RELIABLE_ERRORS: usize = 10;

const BLOCK_STREAM: u64 = 0xE7;
const BLOCK_CHUNK: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub snr_db: Vec<f64>,
    pub tiers: Vec<VelocityTier>,
    /// Block budget per point.
    pub max_blocks: usize,
    /// Stop a point early once this many block errors are seen; 0 never stops early.
    pub target_errors: usize,
    pub seed: u64,
    /// Delay spread assumed by the LMMSE interpolator; defaults to the
    /// midpoint of the link's delay-spread range.
    pub assumed_delay_spread_s: Option<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            snr_db: vec![0.0, 3.0, 6.0, 9.0, 12.0],
            tiers: vec![VelocityTier::Low, VelocityTier::Medium, VelocityTier::High],
            max_blocks: 200,
            target_errors: 100,
            seed: 0xE7A1,
            assumed_delay_spread_s: None,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.snr_db.is_empty() || self.tiers.is_empty() {
            return Err(Error::Config("eval needs at least one SNR point and one tier".into()));
        }
        if self.snr_db.iter().any(|s| !s.is_finite()) {
            return Err(Error::Config("eval.snr_db entries must be finite".into()));
        }
        if self.max_blocks == 0 {
            return Err(Error::Config("eval.max_blocks must be at least 1".into()));
        }
        if let Some(ds) = self.assumed_delay_spread_s {
            if !(ds >= 0.0 && ds.is_finite()) {
                return Err(Error::Config(format!("eval.assumed_delay_spread_s {ds} must be non-negative")));
            }
        }
        Ok(())
    }
}

pub enum EvalReceiver {
    Neural { name: String, model: ReceiverModel },
    LsLmmse,
    PerfectCsi,
}

impl EvalReceiver {
    pub fn neural(model: ReceiverModel) -> Self {
        EvalReceiver::Neural {
            name: model.cfg.variant.name().to_string(),
            model,
        }
    }

    pub fn name(&self) -> &str {
        match self {
            EvalReceiver::Neural { name, .. } => name,
            EvalReceiver::LsLmmse => "ls-lmmse",
            EvalReceiver::PerfectCsi => "perfect-csi",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub receiver: String,
    pub snr_db: f64,
    pub tier: VelocityTier,
    pub blocks: usize,
    pub errors: usize,
    pub bler: f64,
    /// 95% normal-approximation half-width of the BLER estimate.
    pub halfwidth: f64,
    pub undersampled: bool,
}

impl EvalRow {
    fn new(receiver: &str, snr_db: f64, tier: VelocityTier, blocks: usize, errors: usize) -> Self {
        let p = errors as f64 / blocks as f64;
        EvalRow {
            receiver: receiver.to_string(),
            snr_db,
            tier,
            blocks,
            errors,
            bler: p,
            halfwidth: 1.96 * (p * (1.0 - p) / blocks as f64).sqrt(),
            undersampled: errors < MIN_RELIABLE_ERRORS,
        }
    }
}

fn block_error(
    rx: &EvalReceiver,
    sim: &LinkSimulator,
    lmmse: &LmmseConfig,
    tier: VelocityTier,
    snr_db: f64,
    seed: u64,
) -> Result<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = LinkDraw::for_tier(sim.config(), tier, snr_db, &mut rng);
    let s = sim.generate(&draw, derive_seed(seed, &[1]))?;
    let llr = match rx {
        EvalReceiver::Neural { model, .. } => model.infer(&s.grid)?.into_data(),
        EvalReceiver::LsLmmse => ls_lmmse_receive(&s.grid, sim.pilots(), lmmse, sim.constellation())?,
        EvalReceiver::PerfectCsi => perfect_csi_receive(&s.grid, &s.channel, sim.constellation())?,
    };
    sim.block_error(&llr, &s.info)
}

/// BLER of every receiver at every (SNR, tier) point. Block `b` of a point
/// is the same realization for every receiver. Each point runs until the
/// budget or the target error count, whichever comes first; the result does
/// not depend on the worker count.
pub fn evaluate(receivers: &[EvalReceiver], sim: &LinkSimulator, ec: &EvalConfig) -> Result<Vec<EvalRow>> {
    ec.validate()?;
    let l = sim.config();
    for rx in receivers {
        if let EvalReceiver::Neural { name, model } = rx {
            let m = &model.cfg;
            if [m.t, m.f, m.n_rx, m.bits_per_symbol] != [l.num_symbols, l.num_subcarriers, l.num_rx, sim.bits_per_symbol()] {
                return Err(Error::Config(format!("receiver {name} was built for a different grid")));
            }
        }
    }
    let lmmse = LmmseConfig {
        assumed_delay_spread_s: ec.assumed_delay_spread_s.unwrap_or(l.delay_spread_s.midpoint()),
        subcarrier_spacing_hz: l.subcarrier_spacing_hz,
    };
    let mut jobs = Vec::new();
    for (si, &snr) in ec.snr_db.iter().enumerate() {
        for (ti, &tier) in ec.tiers.iter().enumerate() {
            for rx in receivers {
                jobs.push((si, snr, ti, tier, rx));
            }
        }
    }
    jobs.into_par_iter()
        .map(|(si, snr, ti, tier, rx)| {
            let mut blocks = 0;
            let mut errors = 0;
            while blocks < ec.max_blocks && (ec.target_errors == 0 || errors < ec.target_errors) {
                let end = (blocks + BLOCK_CHUNK).min(ec.max_blocks);
                let outcomes: Vec<bool> = (blocks..end)
                    .into_par_iter()
                    .map(|b| {
                        let seed = derive_seed(ec.seed, &[BLOCK_STREAM, si as u64, ti as u64, b as u64]);
                        block_error(rx, sim, &lmmse, tier, snr, seed)
                    })
                    .collect::<Result<_>>()?;
                for e in outcomes {
                    blocks += 1;
                    errors += e as usize;
                    if ec.target_errors > 0 && errors >= ec.target_errors {
                        break;
                    }
                }
            }
            Ok(EvalRow::new(rx.name(), snr, tier, blocks, errors))
        })
        .collect()
}

pub fn write_eval_csv<W: Write>(w: &mut W, header: &str, rows: &[EvalRow]) -> Result<()> {
    writeln!(w, "{header}")?;
    writeln!(w, "receiver,snr_db,velocity_tier,blocks,errors,bler,halfwidth")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{:.17e},{:.17e}",
            r.receiver,
            r.snr_db,
            r.tier.name(),
            r.blocks,
            r.errors,
            r.bler,
            r.halfwidth
        )?;
    }
    Ok(())
}
