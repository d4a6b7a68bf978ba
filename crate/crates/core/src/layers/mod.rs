//! Receiver building blocks and the three neural receiver architectures.

mod attention;
mod blocks;
mod receiver;

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::phy::ResourceGrid;
use crate::tensor::Tensor;

pub use attention::{
    attention, axial_freq_attention, axial_time_attention, global_mhsa, AttentionAxis,
    AttentionOutput, AttentionParams,
};
pub use blocks::{
    axial_block, feed_forward, global_block, resnet_unit, AxialBlockParams, FfnParams,
    GlobalBlockParams, LayerNormParams, ResUnitParams,
};
pub use receiver::{
    forward_features, input_features, input_projection, output_projection, positional_add,
    receiver_forward, resnet_forward,
};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "axial")]
    Axial,
    #[serde(rename = "global")]
    Global,
    #[serde(rename = "cnn-resnet")]
    CnnResnet,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Axial, Variant::Global, Variant::CnnResnet];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Axial => "axial",
            Variant::Global => "global",
            Variant::CnnResnet => "cnn-resnet",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == name)
    }
}

/// Architecture hyperparameters. `Default` is the full-size configuration
/// (T=14, F=128, D=128, H=4, six blocks); [`ReceiverConfig::desk`] is the
/// small profile used for CPU training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReceiverConfig {
    pub variant: Variant,
    pub t: usize,
    pub f: usize,
    pub n_rx: usize,
    pub d_model: usize,
    pub heads: usize,
    pub n_blocks: usize,
    pub ffn_hidden: usize,
    pub input_kernel: usize,
    pub output_kernel: usize,
    pub bits_per_symbol: usize,
    pub resnet_units: usize,
    pub resnet_channels: usize,
    pub resnet_kernel: usize,
}

impl Default for ReceiverConfig {
    fn default() -> Self {
        ReceiverConfig {
            variant: Variant::Axial,
            t: 14,
            f: 128,
            n_rx: 2,
            d_model: 128,
            heads: 4,
            n_blocks: 6,
            ffn_hidden: 256,
            input_kernel: 3,
            output_kernel: 1,
            bits_per_symbol: 6,
            resnet_units: 8,
            resnet_channels: 256,
            resnet_kernel: 3,
        }
    }
}

impl ReceiverConfig {
    pub fn desk() -> Self {
        ReceiverConfig {
            f: 24,
            n_rx: 1,
            d_model: 32,
            heads: 4,
            n_blocks: 2,
            ffn_hidden: 64,
            bits_per_symbol: 2,
            resnet_units: 2,
            resnet_channels: 32,
            ..Self::default()
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.t,
            self.f,
            self.n_rx,
            self.bits_per_symbol,
            self.input_kernel,
            self.output_kernel,
        ];
        if positive.contains(&0) {
            return Err(Error::Config("receiver dimensions must be positive".into()));
        }
        if [self.input_kernel, self.output_kernel, self.resnet_kernel]
            .iter()
            .any(|k| k % 2 == 0)
        {
            return Err(Error::Config("convolution kernels must have odd size".into()));
        }
        match self.variant {
            Variant::Axial | Variant::Global => {
                if self.heads == 0 || self.d_model == 0 || self.d_model % self.heads != 0 {
                    return Err(Error::Config(format!(
                        "embedding dim {} must be a positive multiple of {} heads",
                        self.d_model, self.heads
                    )));
                }
                if self.ffn_hidden == 0 {
                    return Err(Error::Config("ffn_hidden must be positive".into()));
                }
            }
            Variant::CnnResnet => {
                if self.resnet_channels == 0 {
                    return Err(Error::Config("resnet_channels must be positive".into()));
                }
            }
        }
        Ok(())
    }

    pub fn input_channels(&self) -> usize {
        2 * self.n_rx + 1
    }

    /// Width of the feature map between input and output projections.
    pub fn width(&self) -> usize {
        match self.variant {
            Variant::CnnResnet => self.resnet_channels,
            _ => self.d_model,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// Name → shape of every trainable tensor, in checkpoint order.
    pub fn param_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let mut s = BTreeMap::new();
        let w = self.width();
        let d = self.d_model;
        let (ki, ko) = (self.input_kernel, self.output_kernel);
        s.insert("input.w".into(), vec![ki, ki, self.input_channels(), w]);
        s.insert("input.b".into(), vec![w]);
        s.insert("output.w".into(), vec![ko, ko, w, self.bits_per_symbol]);
        s.insert("output.b".into(), vec![self.bits_per_symbol]);
        let ln = |s: &mut BTreeMap<String, Vec<usize>>, p: &str, n: usize| {
            s.insert(format!("{p}.gamma"), vec![n]);
            s.insert(format!("{p}.beta"), vec![n]);
        };
        let attn = |s: &mut BTreeMap<String, Vec<usize>>, p: &str| {
            for m in ["wq", "wk", "wv", "wo"] {
                s.insert(format!("{p}.{m}"), vec![d, d]);
            }
        };
        let ffn = |s: &mut BTreeMap<String, Vec<usize>>, p: &str| {
            s.insert(format!("{p}.w1"), vec![d, self.ffn_hidden]);
            s.insert(format!("{p}.b1"), vec![self.ffn_hidden]);
            s.insert(format!("{p}.w2"), vec![self.ffn_hidden, d]);
            s.insert(format!("{p}.b2"), vec![d]);
        };
        match self.variant {
            Variant::Axial => {
                s.insert("pos".into(), vec![self.t, self.f, d]);
                for i in 0..self.n_blocks {
                    let b = block_prefix(i);
                    ln(&mut s, &format!("{b}.ln1"), d);
                    attn(&mut s, &format!("{b}.time"));
                    ln(&mut s, &format!("{b}.ln2"), d);
                    attn(&mut s, &format!("{b}.freq"));
                    ln(&mut s, &format!("{b}.ln3"), d);
                    ffn(&mut s, &format!("{b}.ffn"));
                }
            }
            Variant::Global => {
                s.insert("pos".into(), vec![self.t, self.f, d]);
                for i in 0..self.n_blocks {
                    let b = block_prefix(i);
                    ln(&mut s, &format!("{b}.ln1"), d);
                    attn(&mut s, &format!("{b}.attn"));
                    ln(&mut s, &format!("{b}.ln2"), d);
                    ffn(&mut s, &format!("{b}.ffn"));
                }
            }
            Variant::CnnResnet => {
                let k = self.resnet_kernel;
                for i in 0..self.resnet_units {
                    let u = unit_prefix(i);
                    ln(&mut s, &format!("{u}.ln"), w);
                    s.insert(format!("{u}.conv1.w"), vec![k, k, w, w]);
                    s.insert(format!("{u}.conv1.b"), vec![w]);
                    s.insert(format!("{u}.conv2.w"), vec![k, k, w, w]);
                    s.insert(format!("{u}.conv2.b"), vec![w]);
                }
            }
        }
        s
    }

    /// Q/K/V/O projection parameters in one block (LN and FFN excluded).
    pub fn attention_projection_params(&self) -> usize {
        let per_attention = 4 * self.d_model * self.d_model;
        match self.variant {
            Variant::Axial => 2 * per_attention,
            Variant::Global => per_attention,
            Variant::CnnResnet => 0,
        }
    }
}

pub(crate) fn block_prefix(i: usize) -> String {
    format!("block{i:02}")
}

pub(crate) fn unit_prefix(i: usize) -> String {
    format!("unit{i:02}")
}

/// Named trainable tensors, iterated in lexicographic order.
pub type ParamStore = BTreeMap<String, Tensor>;

/// Parameters of one receiver plus its configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct ReceiverModel {
    pub cfg: ReceiverConfig,
    pub params: ParamStore,
}

fn fan_in(name: &str, shape: &[usize]) -> usize {
    match shape.len() {
        4 => shape[0] * shape[1] * shape[2],
        2 => shape[0],
        _ => panic!("no fan-in rule for {name} {shape:?}"),
    }
}

impl ReceiverModel {
    /// He-normal projections and convolutions, `N(0, 0.02²)` positional
    /// encoding, unit LN gain and zero biases. The output projection starts
    /// at zero, so a fresh model emits all-zero LLRs.
    pub fn init<R: Rng + ?Sized>(cfg: ReceiverConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        for (name, shape) in cfg.param_shapes() {
            let t = if name == "output.w" {
                Tensor::zeros(&shape)
            } else if name == "pos" {
                Tensor::randn(&shape, 0.02, rng)
            } else if name.ends_with(".gamma") {
                Tensor::ones(&shape)
            } else if shape.len() == 1 {
                Tensor::zeros(&shape)
            } else {
                let std = (2.0 / fan_in(&name, &shape) as f64).sqrt();
                Tensor::randn(&shape, std, rng)
            };
            params.insert(name, t);
        }
        Ok(ReceiverModel { cfg, params })
    }

    /// Checks that `params` holds exactly the tensors `cfg` needs.
    pub fn from_params(cfg: ReceiverConfig, params: ParamStore) -> Result<Self> {
        cfg.validate()?;
        let shapes = cfg.param_shapes();
        if shapes.len() != params.len() {
            return Err(Error::Contract(format!(
                "{} configuration needs {} tensors, got {}",
                cfg.variant.name(),
                shapes.len(),
                params.len()
            )));
        }
        for (name, shape) in &shapes {
            match params.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Shape {
                        op: "load parameter",
                        lhs: shape.clone(),
                        rhs: t.shape().to_vec(),
                    })
                }
                None => return Err(Error::Contract(format!("missing parameter {name}"))),
            }
        }
        Ok(ReceiverModel { cfg, params })
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Registers every parameter as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|(k, t)| (k.clone(), tape.param(t.clone())))
                .collect(),
        }
    }

    /// Shape-only binding for dry-run costing.
    pub fn bind_shapes(cfg: &ReceiverConfig, tape: &mut Tape) -> Bound {
        Bound {
            vars: cfg
                .param_shapes()
                .into_iter()
                .map(|(k, s)| {
                    let v = tape.leaf_shape(&s, true);
                    (k, v)
                })
                .collect(),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, grid: &ResourceGrid) -> Result<Var> {
        receiver_forward(&self.cfg, tape, bound, grid)
    }

    /// Forward pass on a fresh tape, returning the `T×F×bits` LLRs.
    pub fn infer(&self, grid: &ResourceGrid) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let out = self.forward(&mut tape, &bound, grid)?;
        Ok(tape.value(out).clone())
    }
}

/// Parameter name → tape variable for one forward pass.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn from_vars(vars: BTreeMap<String, Var>) -> Self {
        Bound { vars }
    }

    pub fn get(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub(crate) fn ln(&self, prefix: &str) -> LayerNormParams {
        LayerNormParams {
            gamma: self.get(&format!("{prefix}.gamma")),
            beta: self.get(&format!("{prefix}.beta")),
        }
    }

    pub(crate) fn attention(&self, prefix: &str) -> AttentionParams {
        AttentionParams {
            wq: self.get(&format!("{prefix}.wq")),
            wk: self.get(&format!("{prefix}.wk")),
            wv: self.get(&format!("{prefix}.wv")),
            wo: self.get(&format!("{prefix}.wo")),
        }
    }

    pub(crate) fn ffn(&self, prefix: &str) -> FfnParams {
        FfnParams {
            w1: self.get(&format!("{prefix}.w1")),
            b1: self.get(&format!("{prefix}.b1")),
            w2: self.get(&format!("{prefix}.w2")),
            b2: self.get(&format!("{prefix}.b2")),
        }
    }
}
