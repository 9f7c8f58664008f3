use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use tempo_core::config::{Profile, RunConfig, VerifierBackend};
use tempo_core::metrics::{read_instances, score_completions};
use tempo_core::model::TaskKind;
use tempo_core::suite::run_suite;
use tempo_core::trace::CsvTraceWriter;
use tempo_core::train::Trainer;
use tempo_core::Error;

const EXIT_ASSERTION: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DIVERGENCE: u8 = 3;
const EXIT_INTERRUPTED: u8 = 130;

#[derive(Parser)]
#[command(name = "tempo", version, about = "Mode-gated leakage training and theory checks on synthetic universes")]
struct Cli {
    /// Run configuration (TOML, or JSON by extension). Defaults apply when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides both the trainer and environment seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `output_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// paper-faithful | tabular-fast
    #[arg(long, global = true)]
    profile: Option<String>,
    /// Worker threads for group sampling and scoring.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the configured universe; writes trace.csv, summary.json, config.toml.
    Train,
    /// Run every theory check; writes theory_report.json.
    VerifyTheory,
    /// Score a completions file against instance labels.
    Score {
        #[arg(long)]
        completions: PathBuf,
        #[arg(long)]
        instances: PathBuf,
        /// Reject instances of any other kind.
        #[arg(long)]
        task_kind: Option<String>,
        #[arg(long, value_enum, default_value_t = Backend::Rules)]
        backend: Backend,
    },
    /// Generate a universe from `[env]`; writes universe.json.
    GenEnv,
}

#[derive(Clone, Copy, ValueEnum)]
enum Backend {
    Oracle,
    Rules,
    Stub,
}

/// A failure with its exit code attached.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(err: anyhow::Error) -> Self {
        let code = match err.downcast_ref::<Error>() {
            Some(Error::NumericalDivergence(_)) => EXIT_DIVERGENCE,
            Some(Error::Interrupted(_)) => EXIT_INTERRUPTED,
            _ => EXIT_CONFIG,
        };
        Failure { code, err }
    }
}

impl From<Error> for Failure {
    fn from(err: Error) -> Self {
        anyhow::Error::from(err).into()
    }
}

impl From<std::io::Error> for Failure {
    fn from(err: std::io::Error) -> Self {
        Error::from(err).into()
    }
}

type CmdResult = Result<u8, Failure>;

fn config_error(err: impl Into<anyhow::Error>) -> Failure {
    Failure { code: EXIT_CONFIG, err: err.into() }
}

fn load_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(config_error)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.trainer.seed = seed;
        cfg.env.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    if let Some(p) = &cli.profile {
        cfg.profile = p.parse::<Profile>().map_err(config_error)?;
    }
    cfg.resolve().map_err(config_error)
}

fn prepare_output(cfg: &RunConfig) -> anyhow::Result<()> {
    fs::create_dir_all(&cfg.output_dir).with_context(|| format!("creating {}", cfg.output_dir.display()))?;
    fs::write(cfg.output_dir.join("config.toml"), cfg.to_toml())?;
    Ok(())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn cmd_train(cli: &Cli) -> CmdResult {
    let cfg = load_config(cli)?;
    prepare_output(&cfg)?;
    let universe = cfg.universe().map_err(config_error)?;
    let verifier = cfg.verifier(&universe).map_err(config_error)?;
    let trainer = Trainer::new(cfg.trainer.clone(), cfg.reward.clone(), &universe, verifier.as_ref())?;

    let stop = Arc::new(AtomicBool::new(false));
    let flag = Arc::clone(&stop);
    if let Err(e) = ctrlc::set_handler(move || flag.store(true, Ordering::SeqCst)) {
        log::warn!("cannot install Ctrl-C handler: {e}");
    }

    let trace_path = cfg.output_dir.join("trace.csv");
    let file = File::create(&trace_path).with_context(|| format!("creating {}", trace_path.display()))?;
    let mut writer = CsvTraceWriter::new(BufWriter::new(file))?;
    let outcome = match trainer.run(&mut |row| writer.push(row), Some(&stop)) {
        Ok(o) => o,
        Err(Error::Interrupted(step)) => {
            eprintln!("interrupted at step {step}; partial trace in {}", trace_path.display());
            return Ok(EXIT_INTERRUPTED);
        }
        Err(e) => {
            eprintln!("partial trace in {}", trace_path.display());
            return Err(e.into());
        }
    };
    drop(writer);

    let lr = cfg.trainer.lr();
    let summary = outcome.summary(lr)?;
    write_json(&cfg.output_dir.join("summary.json"), &summary)?;
    println!(
        "{} steps at η={lr}: V_c {:.4e} → {:.4e}, mode fraction {:.1}% → {:.1}%",
        summary.steps,
        summary.initial.v_c,
        summary.last.v_c,
        summary.mode_transition.initial_percent,
        summary.mode_transition.final_percent
    );
    Ok(0)
}

fn cmd_verify_theory(cli: &Cli) -> CmdResult {
    let cfg = load_config(cli)?;
    prepare_output(&cfg)?;
    let report = run_suite(&cfg)?;
    write_json(&cfg.output_dir.join("theory_report.json"), &report)?;
    print!("{}", report.render());
    Ok(if report.all_passed() { 0 } else { EXIT_ASSERTION })
}

fn cmd_score(cli: &Cli, completions: &Path, instances: &Path, task_kind: Option<&str>, backend: Backend) -> CmdResult {
    let mut cfg = load_config(cli)?;
    let read = |p: &Path| fs::read_to_string(p).with_context(|| format!("reading {}", p.display())).map_err(config_error);
    let instances = read_instances(&read(instances)?).map_err(config_error)?;
    if let Some(kind) = task_kind {
        let kind: TaskKind = kind.parse().map_err(config_error)?;
        if let Some(bad) = instances.iter().find(|i| i.task_kind != kind) {
            return Err(config_error(anyhow::anyhow!("instance {} is {}, expected {kind}", bad.id, bad.task_kind)));
        }
    }
    cfg.verifier.backend = match backend {
        Backend::Oracle => VerifierBackend::Oracle,
        Backend::Rules => VerifierBackend::Rules,
        Backend::Stub => VerifierBackend::Stub,
    };
    let universe = cfg.universe().map_err(config_error)?;
    let verifier = cfg.verifier(&universe).map_err(config_error)?;
    let run = score_completions(&instances, &read(completions)?, verifier.as_ref())?;

    prepare_output(&cfg)?;
    write_json(&cfg.output_dir.join("metrics.json"), &run)?;
    fs::write(cfg.output_dir.join("per_instance.csv"), run.report.to_csv())?;
    println!("{}", run.report.render());
    if run.unreadable_rows > 0 {
        eprintln!("{} unreadable completion rows skipped", run.unreadable_rows);
    }
    Ok(0)
}

fn cmd_gen_env(cli: &Cli) -> CmdResult {
    let cfg = load_config(cli)?;
    let universe = cfg.universe().map_err(config_error)?;
    prepare_output(&cfg)?;
    fs::write(cfg.output_dir.join("universe.json"), universe.to_json())?;
    println!("{}", serde_json::to_string_pretty(&universe.summary()).map_err(anyhow::Error::from)?);
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("TEMPO_LOG", "warn")).init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    }
    let result = match &cli.command {
        Command::Train => cmd_train(&cli),
        Command::VerifyTheory => cmd_verify_theory(&cli),
        Command::Score { completions, instances, task_kind, backend } => {
            cmd_score(&cli, completions, instances, task_kind.as_deref(), *backend)
        }
        Command::GenEnv => cmd_gen_env(&cli),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}
