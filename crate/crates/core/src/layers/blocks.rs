//! Pre-norm transformer blocks and residual convolution units.

use crate::autodiff::{Tape, Var};
use crate::complexity::FlopKind;
use crate::error::Result;

use super::attention::{attention, AttentionAxis, AttentionParams};
use super::LN_EPS;

#[derive(Clone, Copy, Debug)]
pub struct LayerNormParams {
    pub gamma: Var,
    pub beta: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct FfnParams {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct AxialBlockParams {
    pub ln1: LayerNormParams,
    pub time: AttentionParams,
    pub ln2: LayerNormParams,
    pub freq: AttentionParams,
    pub ln3: LayerNormParams,
    pub ffn: FfnParams,
}

#[derive(Clone, Copy, Debug)]
pub struct GlobalBlockParams {
    pub ln1: LayerNormParams,
    pub attn: AttentionParams,
    pub ln2: LayerNormParams,
    pub ffn: FfnParams,
}

#[derive(Clone, Copy, Debug)]
pub struct ResUnitParams {
    pub ln: LayerNormParams,
    pub conv1_w: Var,
    pub conv1_b: Var,
    pub conv2_w: Var,
    pub conv2_b: Var,
}

fn scoped<T>(tape: &mut Tape, kind: FlopKind, f: impl FnOnce(&mut Tape) -> Result<T>) -> Result<T> {
    let outer = tape.set_scope(kind);
    let r = f(tape);
    tape.set_scope(outer);
    r
}

fn norm(tape: &mut Tape, x: Var, p: &LayerNormParams) -> Result<Var> {
    scoped(tape, FlopKind::LayerNorm, |t| t.layer_norm(x, p.gamma, p.beta, LN_EPS))
}

fn residual(tape: &mut Tape, x: Var, y: Var) -> Result<Var> {
    scoped(tape, FlopKind::Residual, |t| t.add(x, y))
}

/// Position-wise `D → hidden → D` with ReLU.
pub fn feed_forward(tape: &mut Tape, x: Var, p: &FfnParams) -> Result<Var> {
    scoped(tape, FlopKind::FeedForward, |t| {
        let shape = t.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&0);
        let rows = shape.iter().product::<usize>() / d.max(1);
        let x2 = t.reshape(x, &[rows, d])?;
        let h = t.matmul(x2, p.w1)?;
        let h = t.add_bias(h, p.b1)?;
        let h = t.relu(h);
        let y = t.matmul(h, p.w2)?;
        let y = t.add_bias(y, p.b2)?;
        t.reshape(y, &shape)
    })
}

fn attention_sublayer(
    tape: &mut Tape,
    x: Var,
    ln: &LayerNormParams,
    p: &AttentionParams,
    heads: usize,
    axis: AttentionAxis,
) -> Result<Var> {
    let n = norm(tape, x, ln)?;
    let a = attention(tape, n, p, heads, axis)?.out;
    residual(tape, x, a)
}

fn ffn_sublayer(tape: &mut Tape, x: Var, ln: &LayerNormParams, p: &FfnParams) -> Result<Var> {
    let n = norm(tape, x, ln)?;
    let y = feed_forward(tape, n, p)?;
    residual(tape, x, y)
}

/// Time attention, then frequency attention, then FFN, each pre-normed with a skip.
pub fn axial_block(tape: &mut Tape, x: Var, p: &AxialBlockParams, heads: usize) -> Result<Var> {
    let x = attention_sublayer(tape, x, &p.ln1, &p.time, heads, AttentionAxis::Time)?;
    let x = attention_sublayer(tape, x, &p.ln2, &p.freq, heads, AttentionAxis::Frequency)?;
    ffn_sublayer(tape, x, &p.ln3, &p.ffn)
}

pub fn global_block(tape: &mut Tape, x: Var, p: &GlobalBlockParams, heads: usize) -> Result<Var> {
    let x = attention_sublayer(tape, x, &p.ln1, &p.attn, heads, AttentionAxis::Global)?;
    ffn_sublayer(tape, x, &p.ln2, &p.ffn)
}

/// `x + conv(relu(conv(LN(x))))`.
pub fn resnet_unit(tape: &mut Tape, x: Var, p: &ResUnitParams) -> Result<Var> {
    let n = norm(tape, x, &p.ln)?;
    let y = scoped(tape, FlopKind::ResidualConv, |t| {
        let h = t.conv2d(n, p.conv1_w, p.conv1_b)?;
        let h = t.relu(h);
        t.conv2d(h, p.conv2_w, p.conv2_b)
    })?;
    residual(tape, x, y)
}
