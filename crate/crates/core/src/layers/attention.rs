//! Multi-head self-attention along the time axis, the frequency axis, or the
//! flattened grid.

use crate::autodiff::{Tape, Var};
use crate::complexity::FlopKind;
use crate::error::{shape_err, Error, Result};

/// Projection weights of one attention operation. Each is `D×D`; head `h`
/// owns columns `h·d_h..(h+1)·d_h` of `wq`, `wk`, `wv`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionAxis {
    /// Sequences of length T, one per subcarrier.
    Time,
    /// Sequences of length F, one per OFDM symbol.
    Frequency,
    /// One sequence of length T·F.
    Global,
}

/// Output `[T,F,D]` and the attention matrices `[batch·H, L, L]`.
pub struct AttentionOutput {
    pub out: Var,
    pub probs: Var,
}

fn project(tape: &mut Tape, x2: Var, w: Var, t: usize, f: usize, heads: usize) -> Result<Var> {
    let d = tape.shape(x2)[1];
    let y = tape.matmul(x2, w)?;
    tape.reshape(y, &[t, f, heads, d / heads])
}

/// Attention of `x[T,F,D]` along `axis`.
pub fn attention(
    tape: &mut Tape,
    x: Var,
    p: &AttentionParams,
    heads: usize,
    axis: AttentionAxis,
) -> Result<AttentionOutput> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 3 {
        return shape_err("attention", &shape, &[0, 0, 0]);
    }
    let (t0, f0, d) = (shape[0], shape[1], shape[2]);
    if heads == 0 || d % heads != 0 {
        return Err(Error::Dimension(format!(
            "embedding dim {d} not divisible by {heads} heads"
        )));
    }
    for w in [p.wq, p.wk, p.wv, p.wo] {
        if tape.shape(w) != [d, d] {
            return shape_err("attention", &shape, tape.shape(w));
        }
    }
    let dh = d / heads;
    // A global pass is a frequency pass over a 1×(TF) grid.
    let (t, f) = match axis {
        AttentionAxis::Global => (1, t0 * f0),
        _ => (t0, f0),
    };
    let (fwd, inv, batch, len): (&[usize], &[usize], usize, usize) = match axis {
        AttentionAxis::Time => (&[1, 2, 0, 3], &[2, 0, 1, 3], f, t),
        _ => (&[0, 2, 1, 3], &[0, 2, 1, 3], t, f),
    };
    let outer = tape.set_scope(FlopKind::AttentionProjection);
    let x2 = tape.reshape(x, &[t * f, d])?;
    let mut seqs = Vec::with_capacity(3);
    for w in [p.wq, p.wk, p.wv] {
        let y = project(tape, x2, w, t, f, heads)?;
        let y = tape.permute(y, fwd)?;
        seqs.push(tape.reshape(y, &[batch * heads, len, dh])?);
    }
    tape.set_scope(FlopKind::AttentionCore);
    let scores = tape.batch_matmul(seqs[0], seqs[1], true)?;
    tape.set_scope(FlopKind::AttentionSoftmax);
    let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt());
    let probs = tape.softmax(scaled, 2)?;
    tape.set_scope(FlopKind::AttentionCore);
    let ctx = tape.batch_matmul(probs, seqs[2], false)?;
    tape.set_scope(FlopKind::AttentionProjection);
    let permuted_shape: Vec<usize> = fwd.iter().map(|&a| [t, f, heads, dh][a]).collect();
    let ctx = tape.reshape(ctx, &permuted_shape)?;
    let ctx = tape.permute(ctx, inv)?;
    let ctx = tape.reshape(ctx, &[t * f, d])?;
    let out = tape.matmul(ctx, p.wo)?;
    let out = tape.reshape(out, &[t0, f0, d])?;
    tape.set_scope(outer);
    Ok(AttentionOutput { out, probs })
}

pub fn axial_time_attention(tape: &mut Tape, x: Var, p: &AttentionParams, heads: usize) -> Result<Var> {
    Ok(attention(tape, x, p, heads, AttentionAxis::Time)?.out)
}

pub fn axial_freq_attention(tape: &mut Tape, x: Var, p: &AttentionParams, heads: usize) -> Result<Var> {
    Ok(attention(tape, x, p, heads, AttentionAxis::Frequency)?.out)
}

pub fn global_mhsa(tape: &mut Tape, x: Var, p: &AttentionParams, heads: usize) -> Result<Var> {
    Ok(attention(tape, x, p, heads, AttentionAxis::Global)?.out)
}
