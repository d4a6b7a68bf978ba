//! Fast invariant checks shared by the `selftest` command and the test suites.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Tape, Var};
use crate::baseline::{exact_demap, maxlog_demap};
use crate::complexity::{attn_flops_axial, attn_flops_global, reduction_factor};
use crate::error::Result;
use crate::layers::{
    self, AttentionParams, AxialBlockParams, FfnParams, GlobalBlockParams, LayerNormParams, ReceiverConfig,
    ReceiverModel, ResUnitParams, Variant, LN_EPS,
};
use crate::ldpc::{LdpcCode, DEFAULT_MAX_ITER};
use crate::phy::{Constellation, ResourceGrid};
use crate::tensor::{self, Tensor};

pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const EQUIVALENCE_TOLERANCE: f64 = 1e-10;
pub const QPSK_DEMAP_TOLERANCE: f64 = 1e-9;
const FD_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared absolutely.
const GRAD_FLOOR: f64 = 1e-3;

pub type SoftmaxFn = fn(&Tensor, usize) -> Result<Tensor>;

/// Replaceable kernels, so the checks can be shown to catch a broken one.
#[derive(Clone, Copy)]
pub struct Hooks {
    pub softmax: SoftmaxFn,
}

impl Default for Hooks {
    fn default() -> Self {
        Hooks {
            softmax: tensor::softmax,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn fixed_weights(n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xF1F0 + n as u64);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Projects the output of `build` onto fixed random weights so no
/// gradient cancels by symmetry.
fn scalar_loss(tape: &mut Tape, y: Var) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let n = shape.iter().product();
    let r = tape.constant(Tensor::new(&shape, fixed_weights(n))?);
    let p = tape.mul(y, r)?;
    Ok(tape.sum(p))
}

/// Worst relative error between reverse-mode and central-difference
/// gradients of `build` with respect to every entry of every input.
pub fn gradient_check<F>(inputs: &[Tensor], build: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let y = build(&mut tape, &vars)?;
        let l = scalar_loss(&mut tape, y)?;
        Ok(tape.value(l).data()[0])
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let y = build(&mut tape, &vars)?;
    let l = scalar_loss(&mut tape, y)?;
    let grads = tape.backward(l)?;
    let mut xs = inputs.to_vec();
    let mut worst = 0.0f64;
    for (k, &v) in vars.iter().enumerate() {
        let analytic = grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for i in 0..inputs[k].numel() {
            let orig = inputs[k].data()[i];
            xs[k].data_mut()[i] = orig + FD_STEP;
            let up = eval(&xs)?;
            xs[k].data_mut()[i] = orig - FD_STEP;
            let down = eval(&xs)?;
            xs[k].data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * FD_STEP);
            let a = analytic.data()[i];
            worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(GRAD_FLOOR));
        }
    }
    Ok(worst)
}

fn randn(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, std, rng)
}

fn attn(v: &[Var]) -> AttentionParams {
    AttentionParams {
        wq: v[0],
        wk: v[1],
        wv: v[2],
        wo: v[3],
    }
}

fn ln(v: &[Var]) -> LayerNormParams {
    LayerNormParams { gamma: v[0], beta: v[1] }
}

fn ffn(v: &[Var]) -> FfnParams {
    FfnParams {
        w1: v[0],
        b1: v[1],
        w2: v[2],
        b2: v[3],
    }
}

/// Per-layer gradient errors at `T=4, F=4, D=8, H=2`.
pub fn layer_gradient_errors() -> Result<Vec<(&'static str, f64)>> {
    let (t, f, d, h, hidden) = (4, 4, 8, 2, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(0x6AD);
    let x = randn(&[t, f, d], 1.0, &mut rng);
    let w = |rng: &mut ChaCha8Rng| randn(&[d, d], 0.4, rng);
    let gamma = |rng: &mut ChaCha8Rng| {
        let mut g = randn(&[d], 0.1, rng);
        g.data_mut().iter_mut().for_each(|v| *v += 1.0);
        g
    };
    let attn_in: Vec<Tensor> = std::iter::once(x.clone()).chain((0..4).map(|_| w(&mut rng))).collect();
    let ln_in = vec![gamma(&mut rng), randn(&[d], 0.1, &mut rng)];
    let ffn_in = vec![
        randn(&[d, hidden], 0.3, &mut rng),
        randn(&[hidden], 0.1, &mut rng),
        randn(&[hidden, d], 0.3, &mut rng),
        randn(&[d], 0.1, &mut rng),
    ];
    let mut out = Vec::new();

    out.push((
        "layer_norm",
        gradient_check(&[x.clone(), ln_in[0].clone(), ln_in[1].clone()], |tp, v| {
            tp.layer_norm(v[0], v[1], v[2], LN_EPS)
        })?,
    ));
    out.push(("softmax", gradient_check(&[x.clone()], |tp, v| tp.softmax(v[0], 2))?));
    for (name, axis) in [
        ("time_attention", layers::AttentionAxis::Time),
        ("freq_attention", layers::AttentionAxis::Frequency),
        ("global_attention", layers::AttentionAxis::Global),
    ] {
        let e = gradient_check(&attn_in, |tp, v| Ok(layers::attention(tp, v[0], &attn(&v[1..]), h, axis)?.out))?;
        out.push((name, e));
    }
    let mut ffn_all = vec![x.clone()];
    ffn_all.extend(ffn_in.iter().cloned());
    out.push(("feed_forward", gradient_check(&ffn_all, |tp, v| layers::feed_forward(tp, v[0], &ffn(&v[1..])))?));
    let conv_in = vec![
        randn(&[t, f, 3], 1.0, &mut rng),
        randn(&[3, 3, 3, 5], 0.3, &mut rng),
        randn(&[5], 0.1, &mut rng),
    ];
    out.push(("conv2d", gradient_check(&conv_in, |tp, v| tp.conv2d(v[0], v[1], v[2]))?));

    let mut axial = vec![x.clone()];
    for _ in 0..3 {
        axial.extend([gamma(&mut rng), randn(&[d], 0.1, &mut rng)]);
    }
    axial.extend((0..8).map(|_| w(&mut rng)));
    axial.extend(ffn_in.iter().cloned());
    out.push((
        "axial_block",
        gradient_check(&axial, |tp, v| {
            let p = AxialBlockParams {
                ln1: ln(&v[1..3]),
                ln2: ln(&v[3..5]),
                ln3: ln(&v[5..7]),
                time: attn(&v[7..11]),
                freq: attn(&v[11..15]),
                ffn: ffn(&v[15..19]),
            };
            layers::axial_block(tp, v[0], &p, h)
        })?,
    ));
    let mut global = vec![x.clone()];
    for _ in 0..2 {
        global.extend([gamma(&mut rng), randn(&[d], 0.1, &mut rng)]);
    }
    global.extend((0..4).map(|_| w(&mut rng)));
    global.extend(ffn_in.iter().cloned());
    out.push((
        "global_block",
        gradient_check(&global, |tp, v| {
            let p = GlobalBlockParams {
                ln1: ln(&v[1..3]),
                ln2: ln(&v[3..5]),
                attn: attn(&v[5..9]),
                ffn: ffn(&v[9..13]),
            };
            layers::global_block(tp, v[0], &p, h)
        })?,
    ));
    let res = vec![
        x.clone(),
        gamma(&mut rng),
        randn(&[d], 0.1, &mut rng),
        randn(&[3, 3, d, d], 0.15, &mut rng),
        randn(&[d], 0.1, &mut rng),
        randn(&[3, 3, d, d], 0.15, &mut rng),
        randn(&[d], 0.1, &mut rng),
    ];
    out.push((
        "resnet_unit",
        gradient_check(&res, |tp, v| {
            let p = ResUnitParams {
                ln: ln(&v[1..3]),
                conv1_w: v[3],
                conv1_b: v[4],
                conv2_w: v[5],
                conv2_b: v[6],
            };
            layers::resnet_unit(tp, v[0], &p)
        })?,
    ));
    Ok(out)
}

/// Random received grid with every RE carrying data except symbol 1.
pub fn random_grid(t: usize, f: usize, n_rx: usize, bps: usize, seed: u64) -> ResourceGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = t * f;
    let c = |rng: &mut ChaCha8Rng| num_complex::Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal));
    ResourceGrid {
        num_symbols: t,
        num_subcarriers: f,
        num_rx: n_rx,
        y: (0..n * n_rx).map(|_| c(&mut rng)).collect(),
        x: (0..n).map(|_| c(&mut rng)).collect(),
        bits: (0..n * bps).map(|_| rng.random_range(0..2u8)).collect(),
        pilot_mask: (0..n).map(|re| re / f == 1.min(t - 1)).collect(),
        n0: 0.3,
    }
}

/// Gradient error of a whole 1-block receiver at `T=4, F=4, D=8, H=2`,
/// taken over every trainable parameter.
pub fn receiver_gradient_error(variant: Variant) -> Result<f64> {
    let cfg = ReceiverConfig {
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
        resnet_channels: 8,
        ..ReceiverConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0x6AE);
    let mut m = ReceiverModel::init(cfg.clone(), &mut rng)?;
    // Move the zero output projection, LN affine terms and biases away
    // from their trivial init so every gradient path is exercised.
    m.params.insert("output.w".into(), Tensor::randn(m.params["output.w"].shape(), 0.3, &mut rng));
    for t in m.params.values_mut().filter(|t| t.rank() == 1) {
        let noise = Tensor::randn(t.shape(), 0.1, &mut rng);
        t.data_mut().iter_mut().zip(noise.data()).for_each(|(a, b)| *a += b);
    }
    let grid = random_grid(4, 4, 1, 2, 0x6AF);
    let names: Vec<String> = m.params.keys().cloned().collect();
    let inputs: Vec<Tensor> = m.params.into_values().collect();
    gradient_check(&inputs, |tp, v| {
        let bound = layers::Bound::from_vars(names.iter().cloned().zip(v.iter().copied()).collect());
        layers::receiver_forward(&cfg, tp, &bound, &grid)
    })
}

/// Largest `‖axial − global‖∞` over 20 seeds at `F = 1` (time axis) and
/// `T = 1` (frequency axis), sequence lengths up to 32, `D ∈ {8, 32}`.
pub fn degenerate_equivalence_error() -> Result<f64> {
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(0xDE6 + seed);
        for (d, h) in [(8, 2), (32, 4)] {
            let len = rng.random_range(1..=32);
            let w: Vec<Tensor> = (0..4).map(|_| randn(&[d, d], (1.0 / d as f64).sqrt(), &mut rng)).collect();
            for (shape, axis) in [
                ([len, 1, d], layers::AttentionAxis::Time),
                ([1, len, d], layers::AttentionAxis::Frequency),
            ] {
                let x = randn(&shape, 1.0, &mut rng);
                let run = |axis| -> Result<Tensor> {
                    let mut tape = Tape::new();
                    let xv = tape.constant(x.clone());
                    let wv: Vec<Var> = w.iter().map(|t| tape.constant(t.clone())).collect();
                    let y = layers::attention(&mut tape, xv, &attn(&wv), h, axis)?.out;
                    Ok(tape.value(y).clone())
                };
                worst = worst.max(run(axis)?.max_abs_diff(&run(layers::AttentionAxis::Global)?));
            }
        }
    }
    Ok(worst)
}

fn noisy_points(c: &Constellation, n: usize, seed: u64) -> (Vec<num_complex::Complex64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xs = Vec::with_capacity(n);
    let mut nus = Vec::with_capacity(n);
    for _ in 0..n {
        let s = c.points()[rng.random_range(0..c.order())];
        let nu: f64 = 10f64.powf(rng.random_range(-2.0..0.0));
        let e = num_complex::Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal));
        xs.push(s + e * (nu / 2.0).sqrt());
        nus.push(nu);
    }
    (xs, nus)
}

/// Largest `|max-log − exact|` for QPSK over `n` noisy points.
pub fn qpsk_demap_error(n: usize) -> Result<f64> {
    let c = Constellation::qpsk();
    let (x, nu) = noisy_points(&c, n, 0xD3A);
    let a = maxlog_demap(&x, &nu, &c)?;
    let b = exact_demap(&x, &nu, &c)?;
    Ok(a.iter().zip(&b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max))
}

/// `(disagreements, confident)` sign comparison of max-log against exact
/// 16-QAM LLRs, counting only bits whose exact magnitude exceeds 0.5.
pub fn qam16_sign_disagreements(n: usize) -> Result<(usize, usize)> {
    let c = Constellation::new(16)?;
    let (x, nu) = noisy_points(&c, n, 0xD3B);
    let a = maxlog_demap(&x, &nu, &c)?;
    let b = exact_demap(&x, &nu, &c)?;
    let mut bad = 0;
    let mut confident = 0;
    for (p, q) in a.iter().zip(&b) {
        if q.abs() > 0.5 {
            confident += 1;
            if p.signum() != q.signum() {
                bad += 1;
            }
        }
    }
    Ok((bad, confident))
}

/// Number of single-bit flips the `n = 48` code fails to correct, out of
/// every position of four random codewords.
pub fn ldpc_single_flip_failures() -> Result<usize> {
    let code = LdpcCode::construct(48, 3, 1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x1D9);
    let mut failures = 0;
    for _ in 0..4 {
        let info: Vec<u8> = (0..code.k()).map(|_| rng.random_range(0..2u8)).collect();
        let cw = code.encode(&info)?;
        for pos in 0..code.n() {
            let mut llr: Vec<f64> = cw.iter().map(|&b| if b == 1 { 20.0 } else { -20.0 }).collect();
            llr[pos] = -llr[pos];
            if code.decode(&llr, DEFAULT_MAX_ITER)?.bits != cw {
                failures += 1;
            }
        }
    }
    Ok(failures)
}

/// `(T, F, D)` points in `{2..16}×{2..128}×{8,32,128}` where
/// `global / axial ≠ TF / (T+F)` in exact integer arithmetic.
pub fn reduction_identity_violations() -> usize {
    let mut bad = 0;
    for t in 2..=16u64 {
        for f in 2..=128u64 {
            for d in [8u64, 32, 128] {
                let g = attn_flops_global(t, f, d) as u128;
                let a = attn_flops_axial(t, f, d) as u128;
                if g * (t + f) as u128 != a * (t * f) as u128 {
                    bad += 1;
                }
            }
        }
    }
    bad
}

fn softmax_oracle(x: &Tensor) -> Vec<f64> {
    let cols = *x.shape().last().expect("rank ≥ 1");
    x.data()
        .chunks(cols)
        .flat_map(|row| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(move |v| v / s)
        })
        .collect()
}

/// Largest deviation of `softmax` from the direct formula on rows that
/// include large logits.
pub fn softmax_error(softmax: SoftmaxFn) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x50F);
    let mut x = randn(&[6, 7], 3.0, &mut rng);
    x.data_mut()[0] = 800.0;
    x.data_mut()[8] = -800.0;
    let got = softmax(&x, 1)?;
    let want = softmax_oracle(&x);
    Ok(got
        .data()
        .iter()
        .zip(&want)
        .map(|(a, b)| if a.is_finite() { (a - b).abs() } else { f64::INFINITY })
        .fold(0.0, f64::max))
}

fn check(name: &'static str, r: Result<(bool, String)>) -> Check {
    match r {
        Ok((passed, detail)) => Check { name, passed, detail },
        Err(e) => Check {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

/// Runs every check in order.
pub fn run(hooks: &Hooks) -> Vec<Check> {
    let mut out = vec![check("softmax", softmax_error(hooks.softmax).map(|e| (e < 1e-12, format!("max err {e:.1e}"))))];
    match layer_gradient_errors() {
        Ok(errs) => {
            let worst = errs.iter().max_by(|a, b| a.1.total_cmp(&b.1)).expect("non-empty");
            out.push(Check {
                name: "layer gradients",
                passed: errs.iter().all(|(_, e)| *e < GRAD_TOLERANCE),
                detail: format!("{} layers, worst {} {:.1e}", errs.len(), worst.0, worst.1),
            });
        }
        Err(e) => out.push(check("layer gradients", Err(e))),
    }
    for v in Variant::ALL {
        let name = match v {
            Variant::Axial => "receiver gradients (axial)",
            Variant::Global => "receiver gradients (global)",
            Variant::CnnResnet => "receiver gradients (cnn-resnet)",
        };
        out.push(check(
            name,
            receiver_gradient_error(v).map(|e| (e < GRAD_TOLERANCE, format!("max rel err {e:.1e}"))),
        ));
    }
    out.push(check(
        "degenerate equivalence",
        degenerate_equivalence_error().map(|e| (e < EQUIVALENCE_TOLERANCE, format!("max diff {e:.1e}"))),
    ));
    out.push(check(
        "qpsk demapper",
        qpsk_demap_error(10_000).map(|e| (e < QPSK_DEMAP_TOLERANCE, format!("max diff {e:.1e}"))),
    ));
    out.push(check(
        "16-qam demapper signs",
        qam16_sign_disagreements(100_000).map(|(bad, n)| (bad == 0, format!("{bad} of {n} disagree"))),
    ));
    out.push(check(
        "ldpc single flips",
        ldpc_single_flip_failures().map(|f| (f == 0, format!("{f} of 192 uncorrected"))),
    ));
    let bad = reduction_identity_violations();
    let shown = format!("{:.2}", reduction_factor(14, 128));
    out.push(Check {
        name: "flop identity",
        passed: bad == 0 && shown == "12.62",
        detail: format!("{bad} violations, factor(14,128) = {shown}"),
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_build_passes_everything() {
        let checks = run(&Hooks::default());
        for c in &checks {
            assert!(c.passed, "{c:?}");
        }
        assert_eq!(checks.len(), 10);
    }

    fn unnormalized(x: &Tensor, _axis: usize) -> Result<Tensor> {
        let data = x.data().iter().map(|v| v.exp()).collect();
        Tensor::new(x.shape(), data)
    }

    fn unshifted(x: &Tensor, axis: usize) -> Result<Tensor> {
        let cols = x.shape()[axis];
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(cols) {
            let s: f64 = row.iter().map(|v| v.exp()).sum();
            row.iter_mut().for_each(|v| *v = v.exp() / s);
        }
        Tensor::new(x.shape(), data)
    }

    #[test]
    fn broken_softmax_is_detected() {
        for bad in [unnormalized as SoftmaxFn, unshifted] {
            let c = &run_softmax_only(bad);
            assert!(!c.passed, "{c:?}");
        }
    }

    fn run_softmax_only(f: SoftmaxFn) -> Check {
        check("softmax", softmax_error(f).map(|e| (e < 1e-12, format!("{e}"))))
    }

    #[test]
    fn gradient_check_notices_a_wrong_derivative() {
        // relu has a kink at 0; an input sitting on it shows up as a mismatch.
        let x = Tensor::new(&[3], vec![0.0, 1.0, -1.0]).unwrap();
        let e = gradient_check(&[x], |tp, v| Ok(tp.relu(v[0]))).unwrap();
        assert!(e > 0.1);
    }
}
