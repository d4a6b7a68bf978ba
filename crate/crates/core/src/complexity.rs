//! FLOP and parameter accounting.
//!
//! Convention: one multiply plus one add is two FLOPs. Softmax, normalization
//! and activation costs are charged to their own categories so the attention
//! subtotal (score and weighted-sum products only) can be compared exactly
//! against the closed forms below.

use std::collections::BTreeMap;
use std::fmt;

use crate::autodiff::Tape;
use crate::error::Result;
use crate::layers::{ReceiverConfig, ReceiverModel, Variant};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FlopKind {
    InputProjection,
    PositionalEncoding,
    LayerNorm,
    AttentionProjection,
    AttentionCore,
    AttentionSoftmax,
    Residual,
    FeedForward,
    ResidualConv,
    OutputProjection,
    Other,
}

impl FlopKind {
    pub const ALL: [FlopKind; 11] = [
        FlopKind::InputProjection,
        FlopKind::PositionalEncoding,
        FlopKind::LayerNorm,
        FlopKind::AttentionProjection,
        FlopKind::AttentionCore,
        FlopKind::AttentionSoftmax,
        FlopKind::Residual,
        FlopKind::FeedForward,
        FlopKind::ResidualConv,
        FlopKind::OutputProjection,
        FlopKind::Other,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FlopKind::InputProjection => "input_projection",
            FlopKind::PositionalEncoding => "positional_encoding",
            FlopKind::LayerNorm => "layer_norm",
            FlopKind::AttentionProjection => "attention_projection",
            FlopKind::AttentionCore => "attention_core",
            FlopKind::AttentionSoftmax => "attention_softmax",
            FlopKind::Residual => "residual",
            FlopKind::FeedForward => "feed_forward",
            FlopKind::ResidualConv => "residual_conv",
            FlopKind::OutputProjection => "output_projection",
            FlopKind::Other => "other",
        }
    }
}

impl fmt::Display for FlopKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-category FLOP tallies recorded by a [`Tape`].
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FlopCounter {
    counts: BTreeMap<FlopKind, u64>,
}

impl FlopCounter {
    pub fn add(&mut self, kind: FlopKind, flops: u64) {
        if flops > 0 {
            *self.counts.entry(kind).or_default() += flops;
        }
    }

    pub fn get(&self, kind: FlopKind) -> u64 {
        self.counts.get(&kind).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (FlopKind, u64)> + '_ {
        self.counts.iter().map(|(k, v)| (*k, *v))
    }
}

/// Score and weighted-sum FLOPs of global attention over the flattened grid: `4·(TF)²·D`.
pub fn attn_flops_global(t: u64, f: u64, d: u64) -> u64 {
    4 * (t * f) * (t * f) * d
}

/// Same quantity for one time pass plus one frequency pass: `4·T·F·D·(T+F)`.
pub fn attn_flops_axial(t: u64, f: u64, d: u64) -> u64 {
    4 * t * f * d * (t + f)
}

pub fn reduction_factor(t: u64, f: u64) -> f64 {
    (t * f) as f64 / (t + f) as f64
}

const LN_FLOPS_PER_ELEM: u64 = 8;
const SOFTMAX_FLOPS_PER_SCORE: u64 = 6; // 1/√d_h scaling + 5 for the softmax itself

fn conv_flops(t: u64, f: u64, k: u64, cin: u64, cout: u64) -> u64 {
    2 * t * f * k * k * cin * cout + t * f * cout
}

/// Closed-form per-category FLOPs of one forward pass.
pub fn analytic_flops(cfg: &ReceiverConfig) -> FlopCounter {
    let (t, f) = (cfg.t as u64, cfg.f as u64);
    let n = t * f;
    let bits = cfg.bits_per_symbol as u64;
    let cin = 2 * cfg.n_rx as u64 + 1;
    let mut c = FlopCounter::default();
    match cfg.variant {
        Variant::Axial | Variant::Global => {
            let d = cfg.d_model as u64;
            let h = cfg.heads as u64;
            let hidden = cfg.ffn_hidden as u64;
            let blocks = cfg.n_blocks as u64;
            let (attn_passes, lns) = match cfg.variant {
                Variant::Axial => (2, 3),
                _ => (1, 2),
            };
            c.add(FlopKind::InputProjection, conv_flops(t, f, cfg.input_kernel as u64, cin, d));
            c.add(FlopKind::PositionalEncoding, n * d);
            c.add(FlopKind::LayerNorm, blocks * lns * LN_FLOPS_PER_ELEM * n * d);
            c.add(FlopKind::AttentionProjection, blocks * attn_passes * 8 * n * d * d);
            let (core, scores) = match cfg.variant {
                Variant::Axial => (attn_flops_axial(t, f, d), h * (f * t * t + t * f * f)),
                _ => (attn_flops_global(t, f, d), h * n * n),
            };
            c.add(FlopKind::AttentionCore, blocks * core);
            c.add(FlopKind::AttentionSoftmax, blocks * SOFTMAX_FLOPS_PER_SCORE * scores);
            c.add(FlopKind::Residual, blocks * lns * n * d);
            let ffn = 2 * n * d * hidden + 2 * n * hidden + 2 * n * hidden * d + n * d;
            c.add(FlopKind::FeedForward, blocks * ffn);
            c.add(FlopKind::OutputProjection, conv_flops(t, f, cfg.output_kernel as u64, d, bits));
        }
        Variant::CnnResnet => {
            let ch = cfg.resnet_channels as u64;
            let units = cfg.resnet_units as u64;
            let k = cfg.resnet_kernel as u64;
            c.add(FlopKind::InputProjection, conv_flops(t, f, cfg.input_kernel as u64, cin, ch));
            c.add(FlopKind::LayerNorm, units * LN_FLOPS_PER_ELEM * n * ch);
            c.add(FlopKind::ResidualConv, units * (2 * conv_flops(t, f, k, ch, ch) + n * ch));
            c.add(FlopKind::Residual, units * n * ch);
            c.add(FlopKind::OutputProjection, conv_flops(t, f, cfg.output_kernel as u64, ch, bits));
        }
    }
    c
}

/// Runs the real forward pass on a dry-run tape and returns what it recorded.
pub fn counted_flops(cfg: &ReceiverConfig) -> Result<FlopCounter> {
    let mut tape = Tape::dry_run();
    let bound = ReceiverModel::bind_shapes(cfg, &mut tape);
    let z = tape.leaf_shape(&[cfg.t, cfg.f, 2 * cfg.n_rx + 1], false);
    crate::layers::forward_features(cfg, &mut tape, &bound, z)?;
    Ok(tape.flops().clone())
}

#[derive(Clone, Debug)]
pub struct LayerFlops {
    pub kind: FlopKind,
    pub analytic: u64,
    pub counted: u64,
}

#[derive(Clone, Debug)]
pub struct FlopsReport {
    pub variant: Variant,
    pub t: usize,
    pub f: usize,
    pub d_model: usize,
    pub layers: Vec<LayerFlops>,
    pub total_analytic: u64,
    pub total_counted: u64,
    pub params_total: usize,
    pub attention_projection_params: usize,
    /// Analytic score and weighted-sum FLOPs across all blocks.
    pub attention_subtotal: u64,
    pub reduction_factor: f64,
}

impl FlopsReport {
    pub fn counts_match(&self) -> bool {
        self.layers.iter().all(|l| l.analytic == l.counted)
            && self.total_analytic == self.total_counted
    }
}

pub fn model_report(cfg: &ReceiverConfig) -> Result<FlopsReport> {
    cfg.validate()?;
    let analytic = analytic_flops(cfg);
    let counted = counted_flops(cfg)?;
    let layers = FlopKind::ALL
        .iter()
        .map(|&kind| LayerFlops {
            kind,
            analytic: analytic.get(kind),
            counted: counted.get(kind),
        })
        .filter(|l| l.analytic > 0 || l.counted > 0)
        .collect();
    let shapes = cfg.param_shapes();
    let params_total = shapes.values().map(|s| s.iter().product::<usize>()).sum();
    Ok(FlopsReport {
        variant: cfg.variant,
        t: cfg.t,
        f: cfg.f,
        d_model: cfg.d_model,
        layers,
        total_analytic: analytic.total(),
        total_counted: counted.total(),
        params_total,
        attention_projection_params: cfg.attention_projection_params(),
        attention_subtotal: analytic.get(FlopKind::AttentionCore),
        reduction_factor: reduction_factor(cfg.t as u64, cfg.f as u64),
    })
}
