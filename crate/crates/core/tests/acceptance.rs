//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Runs as a plain binary so every criterion reports even when an earlier one
//! fails. Exits nonzero if any criterion outside `KNOWN_FAILURES` fails.

use std::time::Instant;

use axrx::baseline::ls_estimate;
use axrx::channel::VelocityTier;
use axrx::checkpoint;
use axrx::complexity::{model_report, reduction_factor};
use axrx::config::{Preset, RunConfig};
use axrx::layers::{ReceiverConfig, ReceiverModel, Variant};
use axrx::link::{LinkDraw, LinkSimulator};
use axrx::phy::apply_channel_noiseless;
use axrx::selftest;
use axrx::trainer::{self, EvalConfig, EvalReceiver, EvalRow};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GRAD_TOL: f64 = 1e-4;
const EQUIV_TOL: f64 = 1e-10;
const QPSK_TOL: f64 = 1e-9;
const QAM16_POINTS: usize = 100_000;
const LS_TOL: f64 = 1e-12;
const CLASSICAL_SNR_DB: f64 = 20.0;
const CLASSICAL_BLOCKS: usize = 1000;
const SMOKE_WINDOW: usize = 50;
const SMOKE_LOSS_RATIO: f64 = 0.9;
const SMOKE_SNR_DB: f64 = 12.0;
const SMOKE_BLOCKS: usize = 1000;
const SMOKE_LS_FACTOR: f64 = 5.0;
const SWEEP_BLOCKS: usize = 2000;
const SWEEP_INVERSIONS: usize = 1;

/// Criteria that fail at the desk defaults; see the decisions ledger.
const KNOWN_FAILURES: &[&str] = &["classical-chain", "training-smoke"];

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn reduction_identity() -> Outcome {
    let violations = selftest::reduction_identity_violations();
    let printed = format!("{:.2}", reduction_factor(14, 128));
    outcome(
        violations == 0 && printed == "12.62",
        format!("{violations} violations over the grid, factor at T=14 F=128 = {printed}"),
    )
}

fn degenerate_equivalence() -> Outcome {
    match selftest::degenerate_equivalence_error() {
        Ok(e) => outcome(e < EQUIV_TOL, format!("max |axial - global| = {e:.2e} (< {EQUIV_TOL:.0e})")),
        Err(e) => outcome(false, e.to_string()),
    }
}

fn gradient_soundness() -> Outcome {
    let mut worst = ("", 0.0f64);
    let mut checks = 0;
    let layers = match selftest::layer_gradient_errors() {
        Ok(l) => l,
        Err(e) => return outcome(false, e.to_string()),
    };
    for (name, err) in layers {
        checks += 1;
        if err >= worst.1 {
            worst = (name, err);
        }
    }
    for v in [Variant::Axial, Variant::Global, Variant::CnnResnet] {
        match selftest::receiver_gradient_error(v) {
            Ok(err) => {
                checks += 1;
                if err >= worst.1 {
                    worst = (v.name(), err);
                }
            }
            Err(e) => return outcome(false, e.to_string()),
        }
    }
    outcome(
        worst.1 < GRAD_TOL,
        format!("{checks} checks, worst relative error {:.2e} ({}) (< {GRAD_TOL:.0e})", worst.1, worst.0),
    )
}

fn block_projection_params(cfg: &ReceiverConfig) -> usize {
    cfg.param_shapes()
        .iter()
        .filter(|(name, _)| {
            name.starts_with("block00.") && ["wq", "wk", "wv", "wo"].iter().any(|m| name.ends_with(&format!(".{m}")))
        })
        .map(|(_, s)| s.iter().product::<usize>())
        .sum()
}

fn attention_doubling() -> Outcome {
    let mut ok = true;
    let mut detail = Vec::new();
    for (label, base) in [("paper", ReceiverConfig::default()), ("desk", ReceiverConfig::desk())] {
        let axial = base.clone().with_variant(Variant::Axial);
        let global = base.with_variant(Variant::Global);
        let (a, g) = (block_projection_params(&axial), block_projection_params(&global));
        let total = |c: &ReceiverConfig| c.param_shapes().values().map(|s| s.iter().product::<usize>()).sum::<usize>();
        ok &= a == 2 * g && a == axial.attention_projection_params();
        detail.push(format!(
            "{label}: {a} vs {g} per block, total ratio {:.3}",
            total(&axial) as f64 / total(&global) as f64
        ));
    }
    outcome(ok, detail.join("; "))
}

fn flop_ordering() -> Outcome {
    let base = RunConfig::preset(Preset::Paper).model;
    let mut totals = Vec::new();
    for v in [Variant::Axial, Variant::Global, Variant::CnnResnet] {
        match model_report(&base.clone().with_variant(v)) {
            Ok(r) if r.counts_match() => totals.push(r.total_counted),
            Ok(_) => return outcome(false, format!("{}: analytic and counted FLOPs differ", v.name())),
            Err(e) => return outcome(false, e.to_string()),
        }
    }
    let g = |x: u64| x as f64 / 1e9;
    outcome(
        totals[0] < totals[1] && totals[1] < totals[2],
        format!("axial {:.2} < global {:.2} < cnn-resnet {:.2} GFLOPs", g(totals[0]), g(totals[1]), g(totals[2])),
    )
}

fn demapper_oracle() -> Outcome {
    let qpsk = selftest::qpsk_demap_error(10_000);
    let qam = selftest::qam16_sign_disagreements(QAM16_POINTS);
    match (qpsk, qam) {
        (Ok(e), Ok((bad, considered))) => outcome(
            e < QPSK_TOL && bad == 0,
            format!("QPSK max error {e:.2e}; 16-QAM {bad} sign disagreements in {considered} confident LLRs"),
        ),
        (Err(e), _) | (_, Err(e)) => outcome(false, e.to_string()),
    }
}

fn noiseless_ls_error(sim: &LinkSimulator) -> axrx::Result<f64> {
    let cfg = sim.config().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let draw = LinkDraw::sample(&cfg, &mut rng);
        let mut s = sim.generate(&draw, seed)?;
        s.grid.y = apply_channel_noiseless(&s.grid.x, &s.channel)?;
        let est = ls_estimate(&s.grid, sim.pilots())?;
        for (p, &t) in est.symbols.iter().enumerate() {
            for f in 0..est.num_subcarriers {
                for r in 0..est.num_rx {
                    let got = est.h[(p * est.num_subcarriers + f) * est.num_rx + r];
                    worst = worst.max((got - s.channel.at(t, f, r)).norm());
                }
            }
        }
    }
    Ok(worst)
}

fn classical_chain() -> Outcome {
    let sim = LinkSimulator::new(RunConfig::default().link_config()).expect("desk link");
    let ls = match noiseless_ls_error(&sim) {
        Ok(e) => e,
        Err(e) => return outcome(false, e.to_string()),
    };
    let ec = EvalConfig {
        snr_db: vec![CLASSICAL_SNR_DB],
        tiers: vec![VelocityTier::Low],
        max_blocks: CLASSICAL_BLOCKS,
        target_errors: 0,
        ..EvalConfig::default()
    };
    let row = match trainer::evaluate(&[EvalReceiver::PerfectCsi], &sim, &ec) {
        Ok(rows) => rows[0].clone(),
        Err(e) => return outcome(false, e.to_string()),
    };
    let flips = selftest::ldpc_single_flip_failures().unwrap_or(usize::MAX);
    outcome(
        ls < LS_TOL && row.errors == 0 && flips == 0,
        format!(
            "noiseless LS error {ls:.1e}; perfect-CSI at {CLASSICAL_SNR_DB} dB {}/{} block errors; {flips} uncorrected single flips",
            row.errors, row.blocks
        ),
    )
}

fn window_mean(trace: &[trainer::LossRecord]) -> f64 {
    trace.iter().map(|r| r.loss).sum::<f64>() / trace.len() as f64
}

fn training_smoke(axial: &ReceiverModel, trace: &[trainer::LossRecord], sim: &LinkSimulator) -> Outcome {
    if trace.len() < 2 * SMOKE_WINDOW {
        return outcome(false, format!("only {} steps recorded", trace.len()));
    }
    let first = window_mean(&trace[..SMOKE_WINDOW]);
    let last = window_mean(&trace[trace.len() - SMOKE_WINDOW..]);
    let ec = EvalConfig {
        snr_db: vec![SMOKE_SNR_DB],
        tiers: vec![VelocityTier::FlatStatic],
        max_blocks: SMOKE_BLOCKS,
        target_errors: 0,
        ..EvalConfig::default()
    };
    let rows = match trainer::evaluate(&[EvalReceiver::neural(axial.clone()), EvalReceiver::LsLmmse], sim, &ec) {
        Ok(r) => r,
        Err(e) => return outcome(false, e.to_string()),
    };
    let (nn, ls) = (rows[0].bler, rows[1].bler);
    let ratio = last / first;
    outcome(
        ratio <= SMOKE_LOSS_RATIO && nn < 1.0 && nn <= SMOKE_LS_FACTOR * ls,
        format!(
            "loss {first:.4} -> {last:.4} (ratio {ratio:.3}, need <= {SMOKE_LOSS_RATIO}); axial BLER {nn:.3} vs ls-lmmse {ls:.3} (need < 1 and <= {:.3})",
            SMOKE_LS_FACTOR * ls
        ),
    )
}

fn in_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().expect("thread pool").install(f)
}

fn run_artifacts(cfg: &RunConfig) -> axrx::Result<(Vec<u8>, Vec<u8>)> {
    let sim = LinkSimulator::new(cfg.link_config())?;
    let model = trainer::init_model(cfg.receiver_config(Variant::Axial), cfg.seed)?;
    let out = trainer::train(model, &sim, &cfg.train, cfg.seed)?;
    let ckpt = checkpoint::to_bytes(&out.model.params);
    let rows = trainer::evaluate(&[EvalReceiver::neural(out.model), EvalReceiver::LsLmmse], &sim, &cfg.eval)?;
    let mut csv = Vec::new();
    trainer::write_eval_csv(&mut csv, &axrx::provenance_line(&cfg.hash(), cfg.seed), &rows)?;
    Ok((ckpt, csv))
}

fn determinism() -> Outcome {
    let mut cfg = RunConfig::default();
    cfg.seed = 77;
    cfg.train.steps = 12;
    cfg.eval = EvalConfig {
        snr_db: vec![3.0, 9.0],
        tiers: vec![VelocityTier::Low, VelocityTier::High],
        max_blocks: 40,
        target_errors: 10,
        ..EvalConfig::default()
    };
    let runs: Vec<_> = [1, 2, 4].iter().map(|&n| in_pool(n, || run_artifacts(&cfg))).collect();
    let mut same = true;
    for r in &runs {
        match (r, &runs[0]) {
            (Ok(a), Ok(b)) => same &= a == b,
            (Err(e), _) | (_, Err(e)) => return outcome(false, e.to_string()),
        }
    }
    let (ckpt, csv) = runs[0].as_ref().expect("checked above");
    outcome(
        same,
        format!("checkpoint ({} bytes) and eval CSV ({} bytes) identical across 1, 2 and 4 threads", ckpt.len(), csv.len()),
    )
}

/// Inversions where BLER rises with SNR, and whether each lies within the
/// larger of the two half-widths.
fn inversions(rows: &[&EvalRow]) -> (usize, bool) {
    let mut count = 0;
    let mut within = true;
    for w in rows.windows(2) {
        if w[1].bler > w[0].bler {
            count += 1;
            within &= w[1].bler - w[0].bler <= w[0].halfwidth.max(w[1].halfwidth);
        }
    }
    (count, within)
}

fn monotonicity(receivers: &[EvalReceiver], sim: &LinkSimulator) -> Outcome {
    let ec = EvalConfig {
        snr_db: vec![0.0, 3.0, 6.0, 9.0, 12.0],
        tiers: vec![VelocityTier::Low],
        max_blocks: SWEEP_BLOCKS,
        target_errors: 0,
        ..EvalConfig::default()
    };
    let rows = match trainer::evaluate(receivers, sim, &ec) {
        Ok(r) => r,
        Err(e) => return outcome(false, e.to_string()),
    };
    let mut ok = true;
    let mut detail = Vec::new();
    for rx in receivers {
        let mut curve: Vec<&EvalRow> = rows.iter().filter(|r| r.receiver == rx.name()).collect();
        curve.sort_by(|a, b| a.snr_db.total_cmp(&b.snr_db));
        let (n, within) = inversions(&curve);
        ok &= n <= SWEEP_INVERSIONS && within;
        let blers: Vec<String> = curve.iter().map(|r| format!("{:.3}", r.bler)).collect();
        detail.push(format!("{} [{}] {n} inversions", rx.name(), blers.join(" ")));
    }
    outcome(ok, detail.join("; "))
}

fn train_desk(variant: Variant, cfg: &RunConfig, sim: &LinkSimulator) -> axrx::Result<trainer::TrainOutcome> {
    let model = trainer::init_model(cfg.receiver_config(variant), cfg.seed)?;
    trainer::train(model, sim, &cfg.train, cfg.seed)
}

fn main() {
    let started = Instant::now();
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut report = |name: &'static str, o: Outcome| {
        println!("{} {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        results.push((name, o));
    };

    report("reduction-identity", reduction_identity());
    report("degenerate-equivalence", degenerate_equivalence());
    report("gradient-soundness", gradient_soundness());
    report("attention-doubling", attention_doubling());
    report("flop-ordering", flop_ordering());
    report("demapper-oracle", demapper_oracle());
    report("classical-chain", classical_chain());

    let desk = RunConfig::default();
    let sim = LinkSimulator::new(desk.link_config()).expect("desk link");
    let mut trained = Vec::new();
    for v in [Variant::Axial, Variant::Global, Variant::CnnResnet] {
        match train_desk(v, &desk, &sim) {
            Ok(o) => trained.push(o),
            Err(e) => {
                report("training-smoke", outcome(false, format!("{}: {e}", v.name())));
                break;
            }
        }
    }
    if trained.len() == 3 {
        report("training-smoke", training_smoke(&trained[0].model, &trained[0].trace, &sim));
    }
    report("determinism", determinism());
    if trained.len() == 3 {
        let mut receivers: Vec<EvalReceiver> = trained.into_iter().map(|o| EvalReceiver::neural(o.model)).collect();
        receivers.push(EvalReceiver::LsLmmse);
        receivers.push(EvalReceiver::PerfectCsi);
        report("monotonicity", monotonicity(&receivers, &sim));
    } else {
        report("monotonicity", outcome(false, "receivers did not train".into()));
    }

    let passed = results.iter().filter(|(_, o)| o.passed).count();
    let unexpected: Vec<&str> =
        results.iter().filter(|(n, o)| !o.passed && !KNOWN_FAILURES.contains(n)).map(|(n, _)| *n).collect();
    println!("{passed}/{} criteria passed in {:.0?}", results.len(), started.elapsed());
    if !unexpected.is_empty() {
        println!("unexpected failures: {}", unexpected.join(", "));
        std::process::exit(1);
    }
}
