use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use robustdistill::eval::AttackKind;
use robustdistill_cli::commands::{self, Options};
use robustdistill_cli::config::RunConfig;

#[derive(Parser)]
#[command(name = "robustdistill", version, about = "Adversarial training and robust soft-label distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (default: the configured output_dir, else ./out).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Model to evaluate or attack; teacher for train and ablate.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Surrogate model for transfer attacks (eval).
    #[arg(long, global = true)]
    surrogate: Option<PathBuf>,
    /// Record zero wall times in metrics.jsonl so reruns are byte-identical.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Per-epoch progress on stderr.
    #[arg(long, short, global = true)]
    verbose: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model with the configured method.
    Train,
    /// White-box suite (and transfer rows with --surrogate) on the test split.
    Eval,
    /// Write adversarial test examples as an idx file pair.
    Attack {
        #[arg(long, value_enum, default_value = "pgd-trades")]
        attack: AttackArg,
    },
    /// ARD and RSLAD outer losses crossed with their inner maximizations.
    Ablate,
    /// RSLAD with smoothed, natural-teacher and robust-teacher soft labels.
    CompareSoftLabels,
    /// One RSLAD student per teacher in [teacher] checkpoints.
    TeacherSweep,
}

#[derive(Clone, Copy, ValueEnum)]
enum AttackArg {
    Fgsm,
    PgdSat,
    PgdTrades,
    Cw,
}

impl From<AttackArg> for AttackKind {
    fn from(a: AttackArg) -> Self {
        match a {
            AttackArg::Fgsm => AttackKind::Fgsm,
            AttackArg::PgdSat => AttackKind::PgdSat,
            AttackArg::PgdTrades => AttackKind::PgdTrades,
            AttackArg::Cw => AttackKind::Cw,
        }
    }
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("ROBUSTDISTILL_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .with_context(|| format!("ROBUSTDISTILL_THREADS={v:?} is not a positive integer"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default().resolve()?,
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let out = cli
        .out
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    cfg.output_dir = Some(out.clone());
    let opts = Options {
        out,
        deterministic: cli.deterministic,
        verbose: cli.verbose,
    };
    let need_checkpoint = || cli.checkpoint.as_deref().context("--checkpoint is required");
    match cli.command {
        Command::Train => commands::cmd_train(&cfg, cli.checkpoint.as_deref(), &opts),
        Command::Eval => commands::cmd_eval(&cfg, need_checkpoint()?, cli.surrogate.as_deref(), &opts),
        Command::Attack { attack } => commands::cmd_attack(&cfg, need_checkpoint()?, attack.into(), &opts),
        Command::Ablate => commands::cmd_ablate(&cfg, cli.checkpoint.as_deref(), &opts).map(drop),
        Command::CompareSoftLabels => commands::cmd_compare_soft_labels(&cfg, &opts).map(drop),
        Command::TeacherSweep => commands::cmd_teacher_sweep(&cfg, &opts).map(drop),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
