//! Supervised training of the neural receivers and BLER evaluation sweeps.

mod eval;
mod optim;

use std::collections::BTreeMap;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use eval::{evaluate, write_eval_csv, EvalConfig, EvalReceiver, EvalRow, MIN_RELIABLE_ERRORS};
pub use optim::{Adam, AdamConfig};

use crate::autodiff::{Tape, Var};
use crate::derive_seed;
use crate::error::{shape_err, Error, Result};
use crate::layers::{ReceiverConfig, ReceiverModel};
use crate::link::{LinkDraw, LinkSimulator};
use crate::phy::ResourceGrid;
use crate::tensor::Tensor;

const DRAW_STREAM: u64 = 0x7D;
const INIT_STREAM: u64 = 0x1217;
const SAMPLE_STREAM: u64 = 0x5A;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Steps between intermediate checkpoints; 0 disables them.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let a = AdamConfig::default();
        TrainConfig {
            steps: 500,
            batch_size: 8,
            learning_rate: a.learning_rate,
            beta1: a.beta1,
            beta2: a.beta2,
            epsilon: a.epsilon,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("train.learning_rate {} must be positive", self.learning_rate)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("train.{name} {b} must lie in [0, 1)")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("train.epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Masked mean BCE between `llr` (`T×F×bits` logits) and the grid's bits,
/// restricted to data REs.
pub fn bce_loss(tape: &mut Tape, llr: Var, bits: &[u8], pilot_mask: &[bool]) -> Result<Var> {
    let n = tape.shape(llr).iter().product::<usize>();
    if bits.len() != n || pilot_mask.is_empty() || n % pilot_mask.len() != 0 {
        return shape_err("bce_loss", tape.shape(llr), &[bits.len(), pilot_mask.len()]);
    }
    if let Some(&b) = bits.iter().find(|&&b| b > 1) {
        return Err(Error::Domain(format!("bce_loss target bit {b} is not 0 or 1")));
    }
    let bps = n / pilot_mask.len();
    let targets: Vec<f64> = bits.iter().map(|&b| b as f64).collect();
    let mask: Vec<bool> = pilot_mask
        .iter()
        .flat_map(|&p| std::iter::repeat_n(!p, bps))
        .collect();
    tape.bce_with_logits(llr, &targets, &mask)
}

pub fn grid_loss(tape: &mut Tape, llr: Var, grid: &ResourceGrid) -> Result<Var> {
    bce_loss(tape, llr, &grid.bits, &grid.pilot_mask)
}

/// One row of the loss trace.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    pub snr_db: f64,
    pub velocity_mps: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: ReceiverModel,
    pub trace: Vec<LossRecord>,
}

fn check_compatible(model: &ReceiverModel, sim: &LinkSimulator) -> Result<()> {
    let (m, l) = (&model.cfg, sim.config());
    let want = [l.num_symbols, l.num_subcarriers, l.num_rx, sim.bits_per_symbol()];
    let have = [m.t, m.f, m.n_rx, m.bits_per_symbol];
    if want != have {
        return shape_err("model vs link (T, F, N_rx, bits)", &have, &want);
    }
    Ok(())
}

fn sample_gradients(model: &ReceiverModel, grid: &ResourceGrid) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let llr = model.forward(&mut tape, &bound, grid)?;
    let loss = grid_loss(&mut tape, llr, grid)?;
    let mut grads = tape.backward(loss)?;
    let mut out = BTreeMap::new();
    for (name, v) in bound.iter() {
        let g = grads
            .take(v)
            .unwrap_or_else(|| Tensor::zeros(model.params[name].shape()));
        out.insert(name.to_string(), g);
    }
    Ok((tape.value(loss).data()[0], out))
}

/// Fresh model with weights derived from the master seed.
pub fn init_model(cfg: ReceiverConfig, seed: u64) -> Result<ReceiverModel> {
    ReceiverModel::init(cfg, &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[INIT_STREAM])))
}

/// Link conditions of sample `b` in `step`.
pub fn sample_draw(sim: &LinkSimulator, seed: u64, step: usize, b: usize) -> LinkDraw {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[DRAW_STREAM, step as u64, b as u64]));
    LinkDraw::sample(sim.config(), &mut rng)
}

pub fn train(model: ReceiverModel, sim: &LinkSimulator, tc: &TrainConfig, seed: u64) -> Result<TrainOutcome> {
    train_with(model, sim, tc, seed, |_, _| Ok(()))
}

/// Runs `tc.steps` Adam steps. Every sample of a step draws its own link
/// conditions and grid from derived seeds; gradients are averaged in sample
/// order, so results do not depend on the worker count. The trace records
/// the batch-mean loss, SNR and velocity.
/// `on_checkpoint` is called after every `checkpoint_every` steps.
pub fn train_with<F>(
    mut model: ReceiverModel,
    sim: &LinkSimulator,
    tc: &TrainConfig,
    seed: u64,
    mut on_checkpoint: F,
) -> Result<TrainOutcome>
where
    F: FnMut(usize, &ReceiverModel) -> Result<()>,
{
    tc.validate()?;
    check_compatible(&model, sim)?;
    let mut adam = Adam::new(tc.adam());
    let mut trace = Vec::with_capacity(tc.steps);
    for step in 0..tc.steps {
        let draws: Vec<LinkDraw> = (0..tc.batch_size).map(|b| sample_draw(sim, seed, step, b)).collect();
        let results: Vec<Result<(f64, BTreeMap<String, Tensor>)>> = draws
            .par_iter()
            .enumerate()
            .map(|(b, draw)| {
                let sample = sim.generate(draw, derive_seed(seed, &[SAMPLE_STREAM, step as u64, b as u64]))?;
                sample_gradients(&model, &sample.grid)
            })
            .collect();
        let mut loss = 0.0;
        let mut total: BTreeMap<String, Tensor> = BTreeMap::new();
        for r in results {
            let (l, grads) = r?;
            loss += l;
            for (name, g) in grads {
                match total.get_mut(&name) {
                    Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, x)| *a += x),
                    None => {
                        total.insert(name, g);
                    }
                }
            }
        }
        let inv = 1.0 / tc.batch_size as f64;
        loss *= inv;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                config: format!("{draws:?}, {tc:?}"),
            });
        }
        for g in total.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= inv);
        }
        adam.step(&mut model.params, &total)?;
        trace.push(LossRecord {
            step,
            loss,
            snr_db: draws.iter().map(|d| d.snr_db).sum::<f64>() * inv,
            velocity_mps: draws.iter().map(|d| d.velocity_mps).sum::<f64>() * inv,
        });
        if tc.checkpoint_every > 0 && (step + 1) % tc.checkpoint_every == 0 {
            on_checkpoint(step + 1, &model)?;
        }
    }
    Ok(TrainOutcome { model, trace })
}

pub fn write_loss_csv<W: Write>(w: &mut W, header: &str, trace: &[LossRecord]) -> Result<()> {
    writeln!(w, "{header}")?;
    writeln!(w, "step,loss,snr_db,velocity")?;
    for r in trace {
        writeln!(w, "{},{:.17e},{:.17e},{:.17e}", r.step, r.loss, r.snr_db, r.velocity_mps)?;
    }
    Ok(())
}
