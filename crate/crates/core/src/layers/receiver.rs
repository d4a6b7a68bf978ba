//! End-to-end receiver forward passes.

use crate::autodiff::{Tape, Var};
use crate::complexity::FlopKind;
use crate::error::{shape_err, Error, Result};
use crate::phy::ResourceGrid;
use crate::tensor::Tensor;

use super::blocks::{axial_block, global_block, resnet_unit, AxialBlockParams, GlobalBlockParams, ResUnitParams};
use super::{block_prefix, unit_prefix, Bound, ReceiverConfig, Variant};

/// `T×F×(2N_Rx+1)` real features: real parts of every antenna, imaginary
/// parts of every antenna, then `log10(N0)` broadcast over the grid.
pub fn input_features(grid: &ResourceGrid) -> Result<Tensor> {
    if !(grid.n0 > 0.0) {
        return Err(Error::Domain(format!("noise power must be positive, got {}", grid.n0)));
    }
    let nr = grid.num_rx;
    let c = 2 * nr + 1;
    let log_n0 = grid.n0.log10();
    let mut z = Vec::with_capacity(grid.num_res() * c);
    for re in 0..grid.num_res() {
        let y = &grid.y[re * nr..(re + 1) * nr];
        z.extend(y.iter().map(|v| v.re));
        z.extend(y.iter().map(|v| v.im));
        z.push(log_n0);
    }
    Tensor::new(&[grid.num_symbols, grid.num_subcarriers, c], z)
}

fn with_scope<T>(tape: &mut Tape, kind: FlopKind, f: impl FnOnce(&mut Tape) -> Result<T>) -> Result<T> {
    let outer = tape.set_scope(kind);
    let r = f(tape);
    tape.set_scope(outer);
    r
}

pub fn input_projection(tape: &mut Tape, z: Var, w: Var, b: Var) -> Result<Var> {
    with_scope(tape, FlopKind::InputProjection, |t| t.conv2d(z, w, b))
}

pub fn positional_add(tape: &mut Tape, x: Var, pos: Var) -> Result<Var> {
    with_scope(tape, FlopKind::PositionalEncoding, |t| t.add(x, pos))
}

pub fn output_projection(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    with_scope(tape, FlopKind::OutputProjection, |t| t.conv2d(x, w, b))
}

fn axial_params(bound: &Bound, i: usize) -> AxialBlockParams {
    let b = block_prefix(i);
    AxialBlockParams {
        ln1: bound.ln(&format!("{b}.ln1")),
        time: bound.attention(&format!("{b}.time")),
        ln2: bound.ln(&format!("{b}.ln2")),
        freq: bound.attention(&format!("{b}.freq")),
        ln3: bound.ln(&format!("{b}.ln3")),
        ffn: bound.ffn(&format!("{b}.ffn")),
    }
}

fn global_params(bound: &Bound, i: usize) -> GlobalBlockParams {
    let b = block_prefix(i);
    GlobalBlockParams {
        ln1: bound.ln(&format!("{b}.ln1")),
        attn: bound.attention(&format!("{b}.attn")),
        ln2: bound.ln(&format!("{b}.ln2")),
        ffn: bound.ffn(&format!("{b}.ffn")),
    }
}

fn unit_params(bound: &Bound, i: usize) -> ResUnitParams {
    let u = unit_prefix(i);
    ResUnitParams {
        ln: bound.ln(&format!("{u}.ln")),
        conv1_w: bound.get(&format!("{u}.conv1.w")),
        conv1_b: bound.get(&format!("{u}.conv1.b")),
        conv2_w: bound.get(&format!("{u}.conv2.w")),
        conv2_b: bound.get(&format!("{u}.conv2.b")),
    }
}

/// Everything after feature extraction: `z[T,F,2N_Rx+1]` to LLRs `[T,F,bits]`.
pub fn forward_features(cfg: &ReceiverConfig, tape: &mut Tape, bound: &Bound, z: Var) -> Result<Var> {
    let expect = [cfg.t, cfg.f, cfg.input_channels()];
    if tape.shape(z) != expect {
        return shape_err("receiver input", &expect, tape.shape(z));
    }
    let mut x = input_projection(tape, z, bound.get("input.w"), bound.get("input.b"))?;
    match cfg.variant {
        Variant::Axial => {
            x = positional_add(tape, x, bound.get("pos"))?;
            for i in 0..cfg.n_blocks {
                x = axial_block(tape, x, &axial_params(bound, i), cfg.heads)?;
            }
        }
        Variant::Global => {
            x = positional_add(tape, x, bound.get("pos"))?;
            for i in 0..cfg.n_blocks {
                x = global_block(tape, x, &global_params(bound, i), cfg.heads)?;
            }
        }
        Variant::CnnResnet => {
            for i in 0..cfg.resnet_units {
                x = resnet_unit(tape, x, &unit_params(bound, i))?;
            }
        }
    }
    output_projection(tape, x, bound.get("output.w"), bound.get("output.b"))
}

fn check_grid(cfg: &ReceiverConfig, grid: &ResourceGrid) -> Result<()> {
    let got = [grid.num_symbols, grid.num_subcarriers, grid.num_rx];
    let want = [cfg.t, cfg.f, cfg.n_rx];
    if got != want {
        return shape_err("receiver grid", &want, &got);
    }
    Ok(())
}

/// Input projection, positional encoding, blocks and output projection.
pub fn receiver_forward(cfg: &ReceiverConfig, tape: &mut Tape, bound: &Bound, grid: &ResourceGrid) -> Result<Var> {
    check_grid(cfg, grid)?;
    let z = tape.constant(input_features(grid)?);
    forward_features(cfg, tape, bound, z)
}

/// Residual CNN receiver; same as [`receiver_forward`] on a `cnn-resnet` config.
pub fn resnet_forward(cfg: &ReceiverConfig, tape: &mut Tape, bound: &Bound, grid: &ResourceGrid) -> Result<Var> {
    if cfg.variant != Variant::CnnResnet {
        return Err(Error::Config(format!("resnet_forward on a {} config", cfg.variant.name())));
    }
    receiver_forward(cfg, tape, bound, grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::ReceiverModel;
    use num_complex::Complex64;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid(t: usize, f: usize, nr: usize, n0: f64, seed: u64) -> ResourceGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = Tensor::randn(&[t * f * nr * 2], 1.0, &mut rng);
        let y = y.data().chunks(2).map(|c| Complex64::new(c[0], c[1])).collect();
        ResourceGrid {
            num_symbols: t,
            num_subcarriers: f,
            num_rx: nr,
            y,
            x: vec![Complex64::new(0.0, 0.0); t * f],
            bits: vec![0; t * f * 2],
            pilot_mask: vec![false; t * f],
            n0,
        }
    }

    fn small(variant: Variant) -> ReceiverConfig {
        ReceiverConfig {
            variant,
            t: 4,
            f: 4,
            n_rx: 1,
            d_model: 8,
            heads: 2,
            n_blocks: 1,
            ffn_hidden: 16,
            bits_per_symbol: 2,
            resnet_units: 1,
            resnet_channels: 4,
            ..ReceiverConfig::default()
        }
    }

    #[test]
    fn feature_channels() {
        let g = grid(2, 3, 2, 100.0, 1);
        let z = input_features(&g).unwrap();
        assert_eq!(z.shape(), &[2, 3, 5]);
        for re in 0..6 {
            assert_eq!(z.data()[re * 5 + 4], 2.0);
            assert_eq!(z.data()[re * 5 + 1], g.y[re * 2 + 1].re);
            assert_eq!(z.data()[re * 5 + 2], g.y[re * 2].im);
        }
        let mut g = grid(2, 3, 2, 1.0, 1);
        g.y.iter_mut().for_each(|v| *v = Complex64::new(0.0, 0.0));
        assert!(input_features(&g).unwrap().data().iter().all(|&v| v == 0.0));
        g.n0 = 0.0;
        assert!(matches!(input_features(&g), Err(Error::Domain(_))));
    }

    #[test]
    fn positional_add_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0 = Tensor::randn(&[2, 3, 4], 1.0, &mut rng);
        let p0 = Tensor::randn(&[2, 3, 4], 0.02, &mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(x0.clone());
        let zero_p = tape.param(Tensor::zeros(&[2, 3, 4]));
        let y = positional_add(&mut tape, x, zero_p).unwrap();
        assert_eq!(tape.value(y), &x0);
        let zx = tape.constant(Tensor::zeros(&[2, 3, 4]));
        let p = tape.param(p0.clone());
        let y = positional_add(&mut tape, zx, p).unwrap();
        assert_eq!(tape.value(y), &p0);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert!(g.get(p).unwrap().data().iter().all(|&v| v == 1.0));
        let bad = tape.constant(Tensor::zeros(&[3, 2, 4]));
        assert!(positional_add(&mut tape, x, bad).is_err());
    }

    #[test]
    fn output_projection_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = Tensor::randn(&[14, 24, 8], 1.0, &mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(x0.clone());
        let w = tape.param(Tensor::zeros(&[1, 1, 8, 2]));
        let b = tape.param(Tensor::zeros(&[2]));
        let y = output_projection(&mut tape, x, w, b).unwrap();
        assert_eq!(tape.shape(y), &[14, 24, 2]);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        let mut wd = vec![0.0; 16];
        wd[0] = 1.0;
        let w = tape.param(Tensor::new(&[1, 1, 8, 2], wd).unwrap());
        let y = output_projection(&mut tape, x, w, b).unwrap();
        for re in 0..14 * 24 {
            assert_eq!(tape.value(y).data()[re * 2], x0.data()[re * 8]);
        }
    }

    #[test]
    fn forward_runs_for_every_variant() {
        for variant in Variant::ALL {
            let cfg = ReceiverConfig {
                t: 14,
                f: 24,
                n_rx: 2,
                ..ReceiverConfig::desk()
            }
            .with_variant(variant);
            let m = ReceiverModel::init(cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
            let g = grid(14, 24, 2, 0.1, 5);
            let a = m.infer(&g).unwrap();
            assert_eq!(a.shape(), &[14, 24, 2]);
            assert!(a.is_finite());
            let b = m.infer(&g).unwrap();
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn zero_blocks_is_projection_composition() {
        let mut cfg = small(Variant::Axial);
        cfg.n_blocks = 0;
        let m = ReceiverModel::init(cfg, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let g = grid(4, 4, 1, 0.5, 7);
        let got = m.infer(&g).unwrap();
        let mut tape = Tape::new();
        let z = tape.constant(input_features(&g).unwrap());
        let p = |tape: &mut Tape, n: &str| tape.constant(m.params[n].clone());
        let (iw, ib, pos, ow, ob) = (
            p(&mut tape, "input.w"),
            p(&mut tape, "input.b"),
            p(&mut tape, "pos"),
            p(&mut tape, "output.w"),
            p(&mut tape, "output.b"),
        );
        let x = input_projection(&mut tape, z, iw, ib).unwrap();
        let x = positional_add(&mut tape, x, pos).unwrap();
        let y = output_projection(&mut tape, x, ow, ob).unwrap();
        assert_eq!(tape.value(y), &got);
    }

    #[test]
    fn grid_mismatch_is_rejected() {
        let m = ReceiverModel::init(small(Variant::Global), &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        assert!(m.infer(&grid(4, 5, 1, 1.0, 9)).is_err());
        assert!(m.infer(&grid(4, 4, 2, 1.0, 9)).is_err());
        let mut tape = Tape::new();
        let b = m.bind(&mut tape);
        assert!(resnet_forward(&m.cfg, &mut tape, &b, &grid(4, 4, 1, 1.0, 9)).is_err());
    }

    /// Central differences on `mean(LLR)` for every parameter entry.
    fn finite_difference_check(variant: Variant) {
        let cfg = small(variant);
        let mut m = ReceiverModel::init(cfg, &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
        // Non-trivial LN affine parameters so their gradients are exercised.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        // A zero output projection would zero every upstream gradient.
        m.params.insert("output.w".into(), Tensor::randn(m.params["output.w"].shape(), 0.3, &mut rng));
        for (name, t) in m.params.iter_mut() {
            if name.ends_with(".gamma") || name.ends_with(".beta") || name.ends_with(".b") || name.ends_with(".b1") || name.ends_with(".b2") {
                let n = Tensor::randn(t.shape(), 0.1, &mut rng);
                t.add_assign(&n);
            }
        }
        let g = grid(4, 4, 1, 0.3, 12);
        let loss = |m: &ReceiverModel| -> f64 {
            let mut tape = Tape::new();
            let b = m.bind(&mut tape);
            let y = m.forward(&mut tape, &b, &g).unwrap();
            let l = tape.mean(y);
            tape.value(l).data()[0]
        };
        let mut tape = Tape::new();
        let b = m.bind(&mut tape);
        let y = m.forward(&mut tape, &b, &g).unwrap();
        let l = tape.mean(y);
        let grads = tape.backward(l).unwrap();
        let analytic: Vec<(String, Tensor)> = b
            .iter()
            .map(|(n, v)| (n.to_string(), grads.get(v).unwrap().clone()))
            .collect();
        let h = 1e-5;
        let mut worst = 0.0f64;
        for (name, ga) in analytic {
            for i in 0..ga.numel() {
                let orig = m.params[&name].data()[i];
                m.params.get_mut(&name).unwrap().data_mut()[i] = orig + h;
                let up = loss(&m);
                m.params.get_mut(&name).unwrap().data_mut()[i] = orig - h;
                let down = loss(&m);
                m.params.get_mut(&name).unwrap().data_mut()[i] = orig;
                let fd = (up - down) / (2.0 * h);
                let a = ga.data()[i];
                let err = (a - fd).abs() / (a.abs().max(fd.abs()).max(1e-3));
                assert!(err < 1e-4, "{name}[{i}]: analytic {a} vs fd {fd}");
                worst = worst.max(err);
            }
        }
        assert!(worst < 1e-4);
    }

    #[test]
    fn axial_receiver_gradients_match_finite_differences() {
        finite_difference_check(Variant::Axial);
    }

    #[test]
    fn global_receiver_gradients_match_finite_differences() {
        finite_difference_check(Variant::Global);
    }

    #[test]
    fn resnet_receiver_gradients_match_finite_differences() {
        finite_difference_check(Variant::CnnResnet);
    }
}
