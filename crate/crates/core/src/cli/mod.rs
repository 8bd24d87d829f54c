//! Command-line front end. Every command reads one TOML config, applies the
//! flag overrides, and writes its artifacts into a fresh run directory under
//! `output.dir`.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or config error
//! (including a missing prerequisite run).

mod commands;
pub mod runs;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::{Error, Result};
use crate::evalkit::{parse_number, ExperimentConfig};

pub use commands::{ae_file_name, detector_file_name, AeFile, AeSample, DETECTOR_TRAINING_FILE, MODEL_FILE};
pub use runs::{find_run, RunDir, RunManifest, RunStatus, DETECTOR_KEYS, MANIFEST_FILE, MODEL_KEYS};

/// Environment variable capping the worker thread count.
pub const THREADS_ENV: &str = "ADVLAB_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "advlab",
    about = "Adversarial attacks, feature-space detectors and the hierarchical feature constraint"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the classifier.
    Train(Common),
    /// Craft AEs on AdvTest with the trained classifier.
    Attack(Common),
    /// Fit detectors on plain AEs of AdvTrain.
    Detect(Common),
    /// Score plain and HFC AEs with fitted detectors and write the report.
    Eval(Common),
    /// Push one layer's mean activation and measure every feature block.
    Stress(Common),
    /// Check the penultimate-gradient theorems along attack trajectories.
    Probe(Common),
    /// Lesion OOD detection with the HFC anomaly score.
    Ood(Common),
    /// Craft AEs on an independently trained substitute and judge them on the victim.
    Transfer(TransferArgs),
    /// Print the tool version.
    Version,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Toggle {
    On,
    Off,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment config (TOML).
    config: PathBuf,
    /// Attach the hierarchical feature constraint (overrides `hfc.enabled`).
    #[arg(long, value_enum)]
    hfc: Option<Toggle>,
    /// Budget of every attack, e.g. `0.0039` or `1/256`.
    #[arg(long, value_parser = parse_number)]
    epsilon: Option<f64>,
    /// Step size of every attack.
    #[arg(long, value_parser = parse_number)]
    alpha: Option<f64>,
    /// Iteration count of every attack.
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output root (overrides `output.dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Classifier to use: a `model.json` or a train run directory.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Detect run directory to take the detectors from.
    #[arg(long)]
    detectors: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TransferArgs {
    #[command(flatten)]
    common: Common,
    /// Substitute seed (overrides `transfer.substitute_seed`).
    #[arg(long)]
    substitute_seed: Option<u64>,
}

impl Common {
    /// Loads the config and applies the overrides. `--epsilon`, `--alpha`
    /// and `--iters` also reach the probe attack; `--epsilon` replaces the
    /// stress epsilons.
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config).map_err(|e| match e {
            Error::Io { path, source } => {
                Error::Config { key: "config".into(), message: format!("cannot read {}: {source}", path.display()) }
            }
            other => other,
        })?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(t) = self.hfc {
            cfg.hfc.enabled = t == Toggle::On;
        }
        if let Some(out) = &self.out {
            cfg.output.dir = out.clone();
        }
        let probe = cfg.probe.as_mut().map(|p| &mut p.attack);
        for spec in cfg.attacks.iter_mut().chain(probe) {
            if let Some(e) = self.epsilon {
                spec.epsilon = e;
            }
            if let Some(a) = self.alpha {
                spec.alpha = Some(a);
            }
            if let Some(n) = self.iters {
                spec.iterations = Some(n);
            }
        }
        if let (Some(e), Some(s)) = (self.epsilon, cfg.stress.as_mut()) {
            s.epsilons = vec![e];
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Whether an error is the caller's fault (exit 2) rather than a runtime
/// failure (exit 1).
pub fn is_usage_error(e: &Error) -> bool {
    match e {
        Error::Config { .. } | Error::MissingArtifact { .. } => true,
        Error::Stage { source, .. } => is_usage_error(source),
        _ => false,
    }
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize = v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| Error::Config {
        key: THREADS_ENV.to_string(),
        message: format!("expected a positive integer, got `{v}`"),
    })?;
    // a second call in the same process (tests) keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        return 2;
    }
    let outcome = match cli.command {
        Command::Version => {
            println!("advlab {}", env!("CARGO_PKG_VERSION"));
            return 0;
        }
        Command::Train(c) => commands::dispatch("train", &c, None),
        Command::Attack(c) => commands::dispatch("attack", &c, None),
        Command::Detect(c) => commands::dispatch("detect", &c, None),
        Command::Eval(c) => commands::dispatch("eval", &c, None),
        Command::Stress(c) => commands::dispatch("stress", &c, None),
        Command::Probe(c) => commands::dispatch("probe", &c, None),
        Command::Ood(c) => commands::dispatch("ood", &c, None),
        Command::Transfer(t) => commands::dispatch("transfer", &t.common, t.substitute_seed),
    };
    match outcome {
        Ok(dir) => {
            println!("{}", dir.display());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            if is_usage_error(&e) {
                2
            } else {
                1
            }
        }
    }
}
