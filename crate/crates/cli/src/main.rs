use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use axrx::checkpoint;
use axrx::complexity::{model_report, FlopsReport};
use axrx::config::{Preset, RunConfig};
use axrx::layers::{ReceiverModel, Variant};
use axrx::link::LinkSimulator;
use axrx::selftest::{self, Hooks};
use axrx::trainer::{self, EvalReceiver};
use axrx::{provenance_line, Error};
use clap::{Parser, Subcommand, ValueEnum};

const EXIT_USAGE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "axrx", version, about = "Train, evaluate and cost neural OFDM receivers")]
struct Cli {
    /// TOML run configuration; every key is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Master seed; overrides AXRX_SEED and the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true, value_enum)]
    preset: Option<PresetArg>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Desk,
    Paper,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Axial,
    Global,
    CnnResnet,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Axial => Variant::Axial,
            VariantArg::Global => Variant::Global,
            VariantArg::CnnResnet => Variant::CnnResnet,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one receiver and write model.axrx, loss.csv and config.toml.
    Train {
        #[arg(long, value_enum, default_value = "axial")]
        variant: VariantArg,
    },
    /// BLER sweep over the configured SNR points and velocity tiers.
    Eval {
        /// Trained checkpoints; the classical receivers are always included.
        checkpoints: Vec<PathBuf>,
    },
    /// Parameter and FLOP report for the three architectures.
    Flops {
        #[arg(long, value_enum)]
        variant: Option<VariantArg>,
    },
    /// Fast invariant checks.
    Selftest,
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) => EXIT_CONFIG,
            _ => EXIT_RUNTIME,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

fn config_failure(message: String) -> Failure {
    Failure {
        code: EXIT_CONFIG,
        message,
    }
}

struct Run {
    cfg: RunConfig,
    hash: String,
    out: PathBuf,
}

impl Run {
    fn header(&self) -> String {
        provenance_line(&self.hash, self.cfg.seed)
    }

    fn create(&self, name: &str) -> Result<(PathBuf, BufWriter<File>), Failure> {
        fs::create_dir_all(&self.out)?;
        let path = self.out.join(name);
        let f = File::create(&path).map_err(|e| Failure {
            code: EXIT_RUNTIME,
            message: format!("{}: {e}", path.display()),
        })?;
        Ok((path, BufWriter::new(f)))
    }

    fn simulator(&self) -> Result<LinkSimulator, Failure> {
        Ok(LinkSimulator::new(self.cfg.link_config())?)
    }
}

fn resolve(cli: &Cli) -> Result<Run, Failure> {
    let text = match &cli.config {
        Some(p) => fs::read_to_string(p).map_err(|e| {
            config_failure(format!(
                "cannot read config {}: {e}\nusage: axrx [--config FILE] <train|eval|flops|selftest>",
                p.display()
            ))
        })?,
        None => String::new(),
    };
    let preset = cli.preset.map(|p| match p {
        PresetArg::Desk => Preset::Desk,
        PresetArg::Paper => Preset::Paper,
    });
    let mut cfg = RunConfig::from_toml(&text, preset)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    } else if let Ok(s) = std::env::var("AXRX_SEED") {
        cfg.seed = s
            .trim()
            .parse()
            .map_err(|_| config_failure(format!("AXRX_SEED={s:?} is not an unsigned integer")))?;
    }
    let hash = cfg.hash();
    Ok(Run {
        cfg,
        hash,
        out: cli.out.clone(),
    })
}

fn cmd_train(run: &Run, variant: Variant) -> Result<(), Failure> {
    let sim = run.simulator()?;
    let model = trainer::init_model(run.cfg.receiver_config(variant), run.cfg.seed)?;
    eprintln!(
        "training {} ({} parameters) for {} steps",
        variant.name(),
        model.num_params(),
        run.cfg.train.steps
    );
    fs::create_dir_all(&run.out)?;
    let outcome = trainer::train_with(model, &sim, &run.cfg.train, run.cfg.seed, |step, m| {
        checkpoint::save(&run.out.join(format!("model_step{step}.axrx")), &m.params)
    })?;

    checkpoint::save(&run.out.join("model.axrx"), &outcome.model.params)?;
    let (_, mut w) = run.create("loss.csv")?;
    trainer::write_loss_csv(&mut w, &run.header(), &outcome.trace)?;
    w.flush()?;
    let (_, mut w) = run.create("config.toml")?;
    writeln!(w, "{}", run.header())?;
    write!(w, "{}", run.cfg.to_toml())?;
    w.flush()?;
    if let Some(last) = outcome.trace.last() {
        eprintln!("final loss {:.4}", last.loss);
    }
    println!("{}", run.out.display());
    Ok(())
}

fn load_receiver(run: &Run, path: &Path) -> Result<EvalReceiver, Failure> {
    let params = checkpoint::load(path)?;
    let fail = |reason: String| Failure {
        code: EXIT_RUNTIME,
        message: format!("checkpoint {}: {reason}", path.display()),
    };
    let variant = checkpoint::infer_variant(&params).ok_or_else(|| fail("unrecognised parameter layout".into()))?;
    let model = ReceiverModel::from_params(run.cfg.receiver_config(variant), params).map_err(|e| fail(e.to_string()))?;
    Ok(EvalReceiver::neural(model))
}

fn cmd_eval(run: &Run, checkpoints: &[PathBuf]) -> Result<(), Failure> {
    let sim = run.simulator()?;
    let mut receivers = Vec::new();
    for path in checkpoints {
        let mut rx = load_receiver(run, path)?;
        if let EvalReceiver::Neural { name, .. } = &mut rx {
            if receivers.iter().any(|r: &EvalReceiver| r.name() == name) {
                *name = path.file_stem().map_or(name.clone(), |s| s.to_string_lossy().into_owned());
            }
        }
        receivers.push(rx);
    }
    receivers.push(EvalReceiver::LsLmmse);
    receivers.push(EvalReceiver::PerfectCsi);
    let rows = trainer::evaluate(&receivers, &sim, &run.cfg.eval)?;
    let (path, mut w) = run.create("eval.csv")?;
    trainer::write_eval_csv(&mut w, &run.header(), &rows)?;
    w.flush()?;
    println!("{:<12} {:>7} {:<12} {:>7} {:>7} {:>8} {:>8}", "receiver", "snr_db", "tier", "blocks", "errors", "bler", "±");
    for r in &rows {
        println!(
            "{:<12} {:>7} {:<12} {:>7} {:>7} {:>8.4} {:>8.4}{}",
            r.receiver,
            r.snr_db,
            r.tier.name(),
            r.blocks,
            r.errors,
            r.bler,
            r.halfwidth,
            if r.undersampled { "  under-sampled" } else { "" }
        );
    }
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn print_report(r: &FlopsReport) {
    println!("{} (T={}, F={}, D={})", r.variant.name(), r.t, r.f, r.d_model);
    println!("  {:<22} {:>16} {:>16}", "category", "analytic", "counted");
    for l in &r.layers {
        println!("  {:<22} {:>16} {:>16}", l.kind.name(), l.analytic, l.counted);
    }
    println!("  {:<22} {:>16} {:>16}", "total", r.total_analytic, r.total_counted);
    println!(
        "  parameters {}  attention projections {}  GFLOPs {:.2}",
        r.params_total,
        r.attention_projection_params,
        r.total_analytic as f64 / 1e9
    );
}

fn cmd_flops(run: &Run, only: Option<Variant>) -> Result<(), Failure> {
    let variants: Vec<Variant> = match only {
        Some(v) => vec![v],
        None => Variant::ALL.to_vec(),
    };
    let reports = variants
        .iter()
        .map(|&v| model_report(&run.cfg.receiver_config(v)))
        .collect::<axrx::Result<Vec<_>>>()?;
    for r in &reports {
        print_report(r);
        if !r.counts_match() {
            return Err(Failure {
                code: EXIT_RUNTIME,
                message: format!("{}: counted FLOPs disagree with the closed forms", r.variant.name()),
            });
        }
    }
    let find = |v| reports.iter().find(|r| r.variant == v);
    if let (Some(a), Some(g)) = (find(Variant::Axial), find(Variant::Global)) {
        println!(
            "attention projection parameters axial/global = {}",
            a.attention_projection_params as f64 / g.attention_projection_params as f64
        );
        println!("total parameters axial/global = {:.3}", a.params_total as f64 / g.params_total as f64);
    }
    let r = &reports[0];
    println!("reduction factor TF/(T+F) at T={}, F={}: {:.2}", r.t, r.f, r.reduction_factor);

    let (path, mut w) = run.create("flops.csv")?;
    writeln!(w, "{}", run.header())?;
    writeln!(w, "variant,category,analytic,counted")?;
    for r in &reports {
        for l in &r.layers {
            writeln!(w, "{},{},{},{}", r.variant.name(), l.kind.name(), l.analytic, l.counted)?;
        }
        writeln!(w, "{},total,{},{}", r.variant.name(), r.total_analytic, r.total_counted)?;
        writeln!(w, "{},parameters,{},{}", r.variant.name(), r.params_total, r.params_total)?;
    }
    w.flush()?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn cmd_selftest() -> Result<(), Failure> {
    let checks = selftest::run(&Hooks::default());
    let width = checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
    for c in &checks {
        println!("{:<width$}  {}  {}", c.name, if c.passed { "pass" } else { "FAIL" }, c.detail);
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        return Err(Failure {
            code: EXIT_RUNTIME,
            message: format!("{failed} of {} checks failed", checks.len()),
        });
    }
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<(), Failure> {
    let run = resolve(cli)?;
    match &cli.command {
        Command::Train { variant } => cmd_train(&run, (*variant).into()),
        Command::Eval { checkpoints } => cmd_eval(&run, checkpoints),
        Command::Flops { variant } => cmd_flops(&run, variant.map(Into::into)),
        Command::Selftest => cmd_selftest(),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.threads {
        Some(0) => Err(Failure {
            code: EXIT_USAGE,
            message: "--threads must be at least 1".into(),
        }),
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| dispatch(&cli)),
            Err(e) => Err(Failure {
                code: EXIT_RUNTIME,
                message: e.to_string(),
            }),
        },
        None => dispatch(&cli),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("axrx: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
