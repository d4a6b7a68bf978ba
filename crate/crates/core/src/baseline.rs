//! Classical receiver: LS pilot estimates, Wiener interpolation, MMSE
//! combining and soft demapping. Also the perfect-CSI reference.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::channel::ChannelRealization;
use crate::error::{shape_err, Error, Result};
use crate::phy::{Constellation, PilotPattern, ResourceGrid};

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };

/// Channel estimates on pilot symbols, `P×F×N_Rx`.
#[derive(Clone, Debug)]
pub struct PilotEstimates {
    pub symbols: Vec<usize>,
    pub num_subcarriers: usize,
    pub num_rx: usize,
    pub h: Vec<Complex64>,
    /// Per-entry estimation error variance (the noise power, since pilots are unit-modulus).
    pub err_var: f64,
}

impl PilotEstimates {
    fn at(&self, p: usize, f: usize, r: usize) -> Complex64 {
        self.h[(p * self.num_subcarriers + f) * self.num_rx + r]
    }
}

/// Full-grid channel estimate, `T×F×N_Rx` with a per-entry error variance.
#[derive(Clone, Debug)]
pub struct ChannelEstimate {
    pub num_symbols: usize,
    pub num_subcarriers: usize,
    pub num_rx: usize,
    pub h: Vec<Complex64>,
    pub err_var: Vec<f64>,
}

impl ChannelEstimate {
    /// Genie estimate with zero error variance.
    pub fn perfect(h: &ChannelRealization) -> Self {
        ChannelEstimate {
            num_symbols: h.num_symbols,
            num_subcarriers: h.num_subcarriers,
            num_rx: h.num_rx,
            h: h.h.clone(),
            err_var: vec![0.0; h.h.len()],
        }
    }
}

fn check_pilots(grid: &ResourceGrid, pilots: &PilotPattern) -> Result<()> {
    let got = [grid.num_symbols, grid.num_subcarriers];
    let want = [pilots.num_symbols(), pilots.num_subcarriers()];
    if got != want {
        return shape_err("pilot pattern", &want, &got);
    }
    Ok(())
}

/// `ĥ = y / x` at every pilot RE.
pub fn ls_estimate(grid: &ResourceGrid, pilots: &PilotPattern) -> Result<PilotEstimates> {
    check_pilots(grid, pilots)?;
    let (f_n, nr) = (grid.num_subcarriers, grid.num_rx);
    let mut h = Vec::with_capacity(pilots.symbols().len() * f_n * nr);
    for &t in pilots.symbols() {
        for f in 0..f_n {
            let x = pilots.value(t, f).expect("pilot symbol");
            for r in 0..nr {
                h.push(grid.y_at(t, f, r) / x);
            }
        }
    }
    Ok(PilotEstimates {
        symbols: pilots.symbols().to_vec(),
        num_subcarriers: f_n,
        num_rx: nr,
        h,
        err_var: grid.n0,
    })
}

/// Assumptions behind the frequency-direction Wiener filter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LmmseConfig {
    /// RMS delay spread of the assumed uniform power-delay profile.
    pub assumed_delay_spread_s: f64,
    pub subcarrier_spacing_hz: f64,
}

impl LmmseConfig {
    /// Frequency correlation `r(Δk)` of a uniform profile on `[0, √12·σ_τ]`.
    pub fn correlation(&self, dk: i64) -> Complex64 {
        let x = dk as f64 * self.subcarrier_spacing_hz * 12f64.sqrt() * self.assumed_delay_spread_s;
        if x == 0.0 {
            return Complex64::new(1.0, 0.0);
        }
        let px = std::f64::consts::PI * x;
        Complex64::from_polar(px.sin() / px, -px)
    }
}

/// Wiener matrix `R(R + σI)⁻¹` and the error variances `diag(R − R(R + σI)⁻¹R)`,
/// both evaluated in the eigenbasis of `R`.
fn wiener(cfg: &LmmseConfig, f_n: usize, sigma: f64) -> (DMatrix<Complex64>, Vec<f64>) {
    let r = DMatrix::from_fn(f_n, f_n, |i, j| cfg.correlation(i as i64 - j as i64));
    let eig = r.symmetric_eigen();
    let lambda: Vec<f64> = eig.eigenvalues.iter().map(|l| l.max(0.0)).collect();
    let v = &eig.eigenvectors;
    let shrink = DMatrix::from_fn(f_n, f_n, |i, j| {
        if i == j {
            Complex64::new(lambda[i] / (lambda[i] + sigma), 0.0)
        } else {
            ZERO
        }
    });
    let w = v * shrink * v.adjoint();
    let err = (0..f_n)
        .map(|i| {
            (0..f_n)
                .map(|k| v[(i, k)].norm_sqr() * lambda[k] * sigma / (lambda[k] + sigma))
                .sum()
        })
        .collect();
    (w, err)
}

/// Floor on the Wiener regularizer so noiseless inputs stay well conditioned.
const MIN_REGULARIZATION: f64 = 1e-12;

/// Wiener filtering across subcarriers on each pilot symbol, then linear
/// interpolation in time (held constant before the first and after the last
/// pilot symbol).
pub fn lmmse_interpolate(
    est: &PilotEstimates,
    cfg: &LmmseConfig,
    num_symbols: usize,
) -> Result<ChannelEstimate> {
    if est.symbols.is_empty() {
        return Err(Error::Domain("interpolation needs at least one pilot symbol".into()));
    }
    let (f_n, nr) = (est.num_subcarriers, est.num_rx);
    let sigma = est.err_var.max(MIN_REGULARIZATION);
    let (w, err) = wiener(cfg, f_n, sigma);
    let n_p = est.symbols.len();
    let mut smoothed = vec![ZERO; n_p * f_n * nr];
    for p in 0..n_p {
        for r in 0..nr {
            for i in 0..f_n {
                let mut acc = ZERO;
                for j in 0..f_n {
                    acc += w[(i, j)] * est.at(p, j, r);
                }
                smoothed[(p * f_n + i) * nr + r] = acc;
            }
        }
    }
    let mut h = vec![ZERO; num_symbols * f_n * nr];
    let mut err_var = vec![0.0; num_symbols * f_n * nr];
    for t in 0..num_symbols {
        let (p0, p1, a) = time_weights(&est.symbols, t);
        for f in 0..f_n {
            for r in 0..nr {
                let idx = (t * f_n + f) * nr + r;
                let s0 = smoothed[(p0 * f_n + f) * nr + r];
                let s1 = smoothed[(p1 * f_n + f) * nr + r];
                h[idx] = s0 * (1.0 - a) + s1 * a;
                err_var[idx] = ((1.0 - a).powi(2) + a * a) * err[f];
            }
        }
    }
    Ok(ChannelEstimate {
        num_symbols,
        num_subcarriers: f_n,
        num_rx: nr,
        h,
        err_var,
    })
}

/// Bracketing pilot indices and the weight on the second one.
fn time_weights(symbols: &[usize], t: usize) -> (usize, usize, f64) {
    let last = symbols.len() - 1;
    if t <= symbols[0] {
        return (0, 0, 0.0);
    }
    if t >= symbols[last] {
        return (last, last, 0.0);
    }
    let i = symbols.iter().rposition(|&s| s <= t).expect("t is past the first pilot");
    let (s0, s1) = (symbols[i], symbols[i + 1]);
    (i, i + 1, (t - s0) as f64 / (s1 - s0) as f64)
}

/// Per-RE combiner output.
#[derive(Clone, Debug)]
pub struct Equalized {
    /// `ĥᴴy / (ĥᴴĥ + N0')`.
    pub x_hat: Vec<Complex64>,
    /// `N0' / (ĥᴴĥ + N0')`; infinite where `ĥ = 0`.
    pub nu: Vec<f64>,
    /// `ĥᴴĥ / (ĥᴴĥ + N0')`, the bias of `x_hat`.
    pub gain: Vec<f64>,
}

impl Equalized {
    /// Bias-removed symbols `x_hat / gain` and their noise variance `nu / gain`.
    pub fn unbiased(&self) -> (Vec<Complex64>, Vec<f64>) {
        self.x_hat
            .iter()
            .zip(&self.nu)
            .zip(&self.gain)
            .map(|((&x, &nu), &g)| {
                if g > 0.0 {
                    (x / g, nu / g)
                } else {
                    (ZERO, f64::INFINITY)
                }
            })
            .unzip()
    }
}

/// MMSE combining across antennas. `N0' = N0 + ` the mean estimation error
/// variance at the RE, so imperfect estimates widen the LLR distribution.
pub fn mmse_equalize(grid: &ResourceGrid, est: &ChannelEstimate, n0: f64) -> Result<Equalized> {
    if !(n0 >= 0.0) {
        return Err(Error::Domain(format!("noise power must be non-negative, got {n0}")));
    }
    let got = [est.num_symbols, est.num_subcarriers, est.num_rx];
    let want = [grid.num_symbols, grid.num_subcarriers, grid.num_rx];
    if got != want {
        return shape_err("mmse_equalize", &want, &got);
    }
    let nr = grid.num_rx;
    let n = grid.num_res();
    let mut out = Equalized {
        x_hat: Vec::with_capacity(n),
        nu: Vec::with_capacity(n),
        gain: Vec::with_capacity(n),
    };
    for re in 0..n {
        let hs = &est.h[re * nr..(re + 1) * nr];
        let ys = &grid.y[re * nr..(re + 1) * nr];
        let s: f64 = hs.iter().map(|h| h.norm_sqr()).sum();
        if s == 0.0 {
            out.x_hat.push(ZERO);
            out.nu.push(f64::INFINITY);
            out.gain.push(0.0);
            continue;
        }
        let e = est.err_var[re * nr..(re + 1) * nr].iter().sum::<f64>() / nr as f64;
        let n0e = n0 + e;
        let num: Complex64 = hs.iter().zip(ys).map(|(h, y)| h.conj() * y).sum();
        out.x_hat.push(num / (s + n0e));
        out.nu.push(n0e / (s + n0e));
        out.gain.push(s / (s + n0e));
    }
    Ok(out)
}

fn check_demap_inputs(x_hat: &[Complex64], nu: &[f64]) -> Result<()> {
    if x_hat.len() != nu.len() {
        return shape_err("demap", &[x_hat.len()], &[nu.len()]);
    }
    if let Some(v) = nu.iter().find(|v| !(**v > 0.0)) {
        return Err(Error::Domain(format!("demapper noise variance must be positive, got {v}")));
    }
    Ok(())
}

/// Max-log LLRs `(min_{S⁰}|x̂−s|² − min_{S¹}|x̂−s|²)/ν`; positive favors bit 1.
pub fn maxlog_demap(x_hat: &[Complex64], nu: &[f64], c: &Constellation) -> Result<Vec<f64>> {
    check_demap_inputs(x_hat, nu)?;
    let bps = c.bits_per_symbol();
    let mut llr = Vec::with_capacity(x_hat.len() * bps);
    let mut d = vec![0.0; c.order()];
    for (x, &v) in x_hat.iter().zip(nu) {
        if v.is_infinite() {
            llr.extend(std::iter::repeat_n(0.0, bps));
            continue;
        }
        for (dl, p) in d.iter_mut().zip(c.points()) {
            *dl = (x - p).norm_sqr();
        }
        for b in 0..bps {
            let (mut d0, mut d1) = (f64::INFINITY, f64::INFINITY);
            for (label, &dl) in d.iter().enumerate() {
                if c.bit(label, b) == 0 {
                    d0 = d0.min(dl);
                } else {
                    d1 = d1.min(dl);
                }
            }
            llr.push((d0 - d1) / v);
        }
    }
    Ok(llr)
}

/// Exact LLRs by log-sum-exp over each bit's label subsets.
pub fn exact_demap(x_hat: &[Complex64], nu: &[f64], c: &Constellation) -> Result<Vec<f64>> {
    check_demap_inputs(x_hat, nu)?;
    let bps = c.bits_per_symbol();
    let mut llr = Vec::with_capacity(x_hat.len() * bps);
    for (x, &v) in x_hat.iter().zip(nu) {
        if v.is_infinite() {
            llr.extend(std::iter::repeat_n(0.0, bps));
            continue;
        }
        let m: Vec<f64> = c.points().iter().map(|p| -(x - p).norm_sqr() / v).collect();
        for b in 0..bps {
            let lse = |bit: u8| {
                let terms: Vec<f64> = (0..c.order()).filter(|&l| c.bit(l, b) == bit).map(|l| m[l]).collect();
                let mx = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                mx + terms.iter().map(|t| (t - mx).exp()).sum::<f64>().ln()
            };
            llr.push(lse(1) - lse(0));
        }
    }
    Ok(llr)
}

/// Equalize with `est` and max-log demap every RE, giving `T×F×bits` LLRs.
pub fn equalize_and_demap(grid: &ResourceGrid, est: &ChannelEstimate, c: &Constellation) -> Result<Vec<f64>> {
    let eq = mmse_equalize(grid, est, grid.n0)?;
    let (z, v) = eq.unbiased();
    maxlog_demap(&z, &v, c)
}

pub fn perfect_csi_receive(grid: &ResourceGrid, h: &ChannelRealization, c: &Constellation) -> Result<Vec<f64>> {
    equalize_and_demap(grid, &ChannelEstimate::perfect(h), c)
}

pub fn ls_lmmse_receive(
    grid: &ResourceGrid,
    pilots: &PilotPattern,
    cfg: &LmmseConfig,
    c: &Constellation,
) -> Result<Vec<f64>> {
    let ls = ls_estimate(grid, pilots)?;
    let est = lmmse_interpolate(&ls, cfg, grid.num_symbols)?;
    equalize_and_demap(grid, &est, c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{generate, TdlProfile};
    use crate::phy::{apply_channel, apply_channel_noiseless, build_grid};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const T: usize = 14;
    const F: usize = 24;

    fn pilots() -> PilotPattern {
        PilotPattern::new(&[2, 11], T, F, 7).unwrap()
    }

    fn lmmse_cfg(ds: f64) -> LmmseConfig {
        LmmseConfig {
            assumed_delay_spread_s: ds,
            subcarrier_spacing_hz: 30e3,
        }
    }

    fn transmit(
        h: &ChannelRealization,
        n0: f64,
        rng: &mut ChaCha8Rng,
    ) -> (ResourceGrid, Vec<u8>) {
        let p = pilots();
        let c = Constellation::qpsk();
        let bits: Vec<u8> = (0..p.data_res() * 2).map(|_| rng.random_range(0..2u8)).collect();
        let x = build_grid(&c.map_bits(&bits).unwrap(), &p).unwrap();
        let y = if n0 > 0.0 {
            apply_channel(&x, h, n0, rng).unwrap()
        } else {
            apply_channel_noiseless(&x, h).unwrap()
        };
        let grid = ResourceGrid {
            num_symbols: T,
            num_subcarriers: F,
            num_rx: h.num_rx,
            y,
            x,
            bits: vec![],
            pilot_mask: p.mask(),
            n0: n0.max(1e-12),
        };
        (grid, bits)
    }

    fn constant_channel(nr: usize, v: Complex64) -> ChannelRealization {
        ChannelRealization {
            num_symbols: T,
            num_subcarriers: F,
            num_rx: nr,
            h: vec![v; T * F * nr],
            profile: TdlProfile::single_tap(0.0),
            seed: 0,
        }
    }

    #[test]
    fn noiseless_ls_is_exact() {
        let h = generate(&TdlProfile::exponential(50e-9, 8, 300.0).unwrap(), T, F, 2, 30e3, 3).unwrap();
        let (g, _) = transmit(&h, 0.0, &mut ChaCha8Rng::seed_from_u64(1));
        let ls = ls_estimate(&g, &pilots()).unwrap();
        for (p, &t) in ls.symbols.iter().enumerate() {
            for f in 0..F {
                for r in 0..2 {
                    assert!((ls.at(p, f, r) - h.at(t, f, r)).norm() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn ls_error_has_noise_variance_and_no_bias() {
        let n0 = 0.3;
        let h = constant_channel(1, Complex64::new(0.6, -0.2));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (mut sum, mut sq, mut n) = (ZERO, 0.0, 0.0);
        while n < 1e5 {
            let (g, _) = transmit(&h, n0, &mut rng);
            let ls = ls_estimate(&g, &pilots()).unwrap();
            for v in &ls.h {
                let e = v - h.h[0];
                sum += e;
                sq += e.norm_sqr();
                n += 1.0;
            }
        }
        assert!((sq / n - n0).abs() / n0 < 0.03);
        assert!((sum.re / n).abs() < 0.01 && (sum.im / n).abs() < 0.01);
    }

    #[test]
    fn flat_noiseless_interpolation_is_exact() {
        let h = constant_channel(1, Complex64::new(-0.4, 0.9));
        let (g, _) = transmit(&h, 0.0, &mut ChaCha8Rng::seed_from_u64(3));
        let ls = ls_estimate(&g, &pilots()).unwrap();
        let est = lmmse_interpolate(&ls, &lmmse_cfg(55e-9), T).unwrap();
        for (a, b) in est.h.iter().zip(&h.h) {
            assert!((a - b).norm() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn large_noise_shrinks_estimates() {
        let h = constant_channel(1, Complex64::new(1.0, 0.0));
        let (mut g, _) = transmit(&h, 0.0, &mut ChaCha8Rng::seed_from_u64(4));
        g.n0 = 1e9;
        let ls = ls_estimate(&g, &pilots()).unwrap();
        let est = lmmse_interpolate(&ls, &lmmse_cfg(55e-9), T).unwrap();
        assert!(est.h.iter().all(|v| v.norm() < 1e-6));
    }

    #[test]
    fn static_multitap_matched_interpolation() {
        let ds = 50e-9;
        let mut worst = 0.0f64;
        for seed in 0..20 {
            let h = generate(&TdlProfile::exponential(ds, 8, 0.0).unwrap(), T, F, 1, 30e3, seed).unwrap();
            let (g, _) = transmit(&h, 0.0, &mut ChaCha8Rng::seed_from_u64(seed));
            let ls = ls_estimate(&g, &pilots()).unwrap();
            let est = lmmse_interpolate(&ls, &lmmse_cfg(ds), T).unwrap();
            let mask = pilots().mask();
            let (mut err, mut pow) = (0.0, 0.0);
            for re in (0..T * F).filter(|&re| !mask[re]) {
                err += (est.h[re] - h.h[re]).norm_sqr();
                pow += h.h[re].norm_sqr();
            }
            worst = worst.max(err / pow);
        }
        assert!(worst < 1e-3, "relative mse {worst}");
    }

    #[test]
    fn time_weights_hold_and_interpolate() {
        assert_eq!(time_weights(&[2, 11], 0), (0, 0, 0.0));
        assert_eq!(time_weights(&[2, 11], 13), (1, 1, 0.0));
        let (a, b, w) = time_weights(&[2, 11], 5);
        assert_eq!((a, b), (0, 1));
        assert!((w - 3.0 / 9.0).abs() < 1e-15);
        assert_eq!(time_weights(&[4], 9), (0, 0, 0.0));
    }

    #[test]
    fn equalizer_closed_forms() {
        let c = Constellation::qpsk();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // Perfect CSI, tiny noise: x̂ ≈ x.
        let h = generate(&TdlProfile::exponential(30e-9, 8, 100.0).unwrap(), T, F, 2, 30e3, 6).unwrap();
        let (g, _) = transmit(&h, 0.0, &mut rng);
        let eq = mmse_equalize(&g, &ChannelEstimate::perfect(&h), 1e-12).unwrap();
        for (a, b) in eq.x_hat.iter().zip(&g.x) {
            assert!((a - b).norm() < 1e-6);
        }
        // N_Rx = 1, h = 1: x̂ = y / (1 + N0).
        let h1 = constant_channel(1, Complex64::new(1.0, 0.0));
        let (g, _) = transmit(&h1, 0.5, &mut rng);
        let eq = mmse_equalize(&g, &ChannelEstimate::perfect(&h1), 0.5).unwrap();
        for (a, y) in eq.x_hat.iter().zip(&g.y) {
            assert!((a - y / 1.5).norm() < 1e-15);
        }
        // Zero estimate: no information.
        let h0 = constant_channel(1, ZERO);
        let eq = mmse_equalize(&g, &ChannelEstimate::perfect(&h0), 0.5).unwrap();
        assert!(eq.x_hat.iter().all(|x| *x == ZERO));
        assert!(eq.nu.iter().all(|v| v.is_infinite()));
        let (z, v) = eq.unbiased();
        assert!(maxlog_demap(&z, &v, &c).unwrap().iter().all(|&l| l == 0.0));
    }

    #[test]
    fn equalizer_matches_per_re_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let h = generate(&TdlProfile::exponential(80e-9, 8, 400.0).unwrap(), T, F, 2, 30e3, 8).unwrap();
        let (g, _) = transmit(&h, 0.2, &mut rng);
        let mut est = ChannelEstimate::perfect(&h);
        est.err_var.iter_mut().enumerate().for_each(|(i, e)| *e = 0.01 * (i % 3) as f64);
        let eq = mmse_equalize(&g, &est, 0.2).unwrap();
        for re in [0, 17, 100, 335] {
            let (h0, h1) = (est.h[2 * re], est.h[2 * re + 1]);
            let (y0, y1) = (g.y[2 * re], g.y[2 * re + 1]);
            let n0e = 0.2 + 0.5 * (est.err_var[2 * re] + est.err_var[2 * re + 1]);
            let s = h0.norm_sqr() + h1.norm_sqr();
            let want = (h0.conj() * y0 + h1.conj() * y1) / (s + n0e);
            assert!((eq.x_hat[re] - want).norm() < 1e-14);
            assert!((eq.nu[re] - n0e / (s + n0e)).abs() < 1e-15);
        }
    }

    #[test]
    fn equalizer_is_phase_invariant() {
        let c = Constellation::new(16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h = generate(&TdlProfile::exponential(40e-9, 8, 200.0).unwrap(), T, F, 2, 30e3, 10).unwrap();
        let (g, _) = transmit(&h, 0.1, &mut rng);
        let rot = Complex64::from_polar(1.0, 0.77);
        let mut g2 = g.clone();
        g2.y.iter_mut().for_each(|y| *y *= rot);
        let mut h2 = ChannelEstimate::perfect(&h);
        h2.h.iter_mut().for_each(|v| *v *= rot);
        let a = mmse_equalize(&g, &ChannelEstimate::perfect(&h), 0.1).unwrap();
        let b = mmse_equalize(&g2, &h2, 0.1).unwrap();
        for (x, y) in a.x_hat.iter().zip(&b.x_hat) {
            assert!((x.norm() - y.norm()).abs() < 1e-14);
        }
        let (za, va) = a.unbiased();
        let (zb, vb) = b.unbiased();
        let la = maxlog_demap(&za, &va, &c).unwrap();
        let lb = maxlog_demap(&zb, &vb, &c).unwrap();
        for (x, y) in la.iter().zip(&lb) {
            assert!((x.abs() - y.abs()).abs() < 1e-9);
        }
    }

    #[test]
    fn qpsk_maxlog_is_exact() {
        let c = Constellation::qpsk();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let xs: Vec<Complex64> = (0..1000)
            .map(|_| Complex64::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)))
            .collect();
        let nu: Vec<f64> = (0..1000).map(|_| rng.random_range(0.05..2.0)).collect();
        let a = maxlog_demap(&xs, &nu, &c).unwrap();
        let b = exact_demap(&xs, &nu, &c).unwrap();
        for i in 0..1000 {
            let closed = 2.0 * 2f64.sqrt() / nu[i];
            assert!((a[2 * i] - closed * xs[i].re).abs() < 1e-9);
            assert!((a[2 * i + 1] - closed * xs[i].im).abs() < 1e-9);
            assert!((a[2 * i] - b[2 * i]).abs() < 1e-9);
            assert!((a[2 * i + 1] - b[2 * i + 1]).abs() < 1e-9);
        }
    }

    #[test]
    fn midpoint_gives_zero_llr() {
        // The first bit splits the in-phase levels at zero.
        let c = Constellation::new(16).unwrap();
        let l = maxlog_demap(&[Complex64::new(0.0, 0.3)], &[0.3], &c).unwrap();
        assert!(l[0].abs() < 1e-12);
        let zero = exact_demap(&[ZERO], &[1.0], &Constellation::qpsk()).unwrap();
        assert!(zero.iter().all(|v| v.abs() < 1e-12));
        // Sign bits of 16-QAM are also undecided at the origin.
        let zero = exact_demap(&[ZERO], &[1.0], &c).unwrap();
        assert!(zero[0].abs() < 1e-12 && zero[2].abs() < 1e-12);
    }

    #[test]
    fn sixteen_qam_maxlog_tracks_exact() {
        let c = Constellation::new(16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let xs: Vec<Complex64> = (0..20_000)
            .map(|_| Complex64::new(rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)))
            .collect();
        let nu: Vec<f64> = (0..20_000).map(|_| rng.random_range(0.01..0.2)).collect();
        let a = maxlog_demap(&xs, &nu, &c).unwrap();
        let b = exact_demap(&xs, &nu, &c).unwrap();
        for (m, e) in a.iter().zip(&b) {
            if e.abs() > 0.5 {
                assert_eq!(m.signum(), e.signum());
            }
            if e.abs() > 2.0 {
                assert!((m - e).abs() <= 0.15 * e.abs(), "maxlog {m} exact {e}");
            }
        }
    }

    #[test]
    fn demapping_points_recovers_labels() {
        for m in [4, 16, 64] {
            let c = Constellation::new(m).unwrap();
            let nu = vec![1e-3; m];
            let l = maxlog_demap(c.points(), &nu, &c).unwrap();
            for label in 0..m {
                for b in 0..c.bits_per_symbol() {
                    let bit = (l[label * c.bits_per_symbol() + b] > 0.0) as u8;
                    assert_eq!(bit, c.bit(label, b));
                }
            }
        }
        assert!(maxlog_demap(&[ZERO], &[0.0], &Constellation::qpsk()).is_err());
    }

    #[test]
    fn perfect_csi_noiseless_recovers_bits() {
        let c = Constellation::qpsk();
        let h = generate(&TdlProfile::exponential(60e-9, 8, 300.0).unwrap(), T, F, 1, 30e3, 13).unwrap();
        let (g, bits) = transmit(&h, 0.0, &mut ChaCha8Rng::seed_from_u64(14));
        let llr = perfect_csi_receive(&g, &h, &c).unwrap();
        let data = crate::phy::extract_data(&llr, &g.pilot_mask, 2);
        let hard: Vec<u8> = data.iter().map(|&l| (l > 0.0) as u8).collect();
        assert_eq!(hard, bits);
    }

    #[test]
    fn llr_magnitude_falls_with_noise_variance() {
        let c = Constellation::new(16).unwrap();
        let x = [Complex64::new(0.2, -0.7)];
        let mut prev = f64::INFINITY;
        for nu in [0.01, 0.1, 0.5, 1.0, 4.0] {
            let l = maxlog_demap(&x, &[nu], &c).unwrap();
            let mag: f64 = l.iter().map(|v| v.abs()).sum();
            assert!(mag < prev);
            prev = mag;
        }
    }
}
