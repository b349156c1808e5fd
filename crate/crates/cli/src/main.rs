use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use skilledit_cli::pipeline::{self, RunDir, CONFIG};
use skilledit_cli::RunConfig;

#[derive(Parser)]
#[command(name = "skilledit", version, about = "Edit novice motion toward expert technique")]
struct Cli {
    /// JSON run configuration; defaults to `<out>/config.json` when present,
    /// otherwise the built-in desk configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Reseed every stage from this number.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    /// Splice decoded rotations without boundary crossfade.
    #[arg(long, global = true)]
    strict_splice: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic expert and novice corpora.
    Synth,
    /// Train the motion tokenizer on the expert corpus.
    TrainTokenizer,
    /// Train the masked infiller on tokenized experts.
    TrainInfiller,
    /// Retrieve and align expert references for every evaluation novice.
    Pair,
    /// Produce edited clips for every evaluation novice.
    Edit,
    /// Train the novice/expert classifier used for Fréchet statistics.
    TrainClassifier,
    /// Compute P and F and write metrics.json.
    Eval,
    /// All stages in order.
    Run,
    /// Shared stages once, then one infiller and report per training fraction.
    Sweep {
        #[arg(long, value_delimiter = ',', default_value = "0.3,0.6,1.0")]
        fractions: Vec<f64>,
    },
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let snapshot = cli.out.join(CONFIG);
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None if snapshot.is_file() => RunConfig::load(&snapshot)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set_base_seed(seed);
    }
    if cli.strict_splice {
        cfg.crossfade = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn save_snapshot(cfg: &RunConfig, dir: &RunDir) -> Result<()> {
    std::fs::create_dir_all(&dir.root).with_context(|| format!("creating {}", dir.root.display()))?;
    std::fs::write(dir.shared(CONFIG), cfg.to_json() + "\n").context("writing config snapshot")
}

fn execute(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli).context("stage config")?;
    let dir = RunDir::new(&cli.out);
    match cli.command {
        Command::Run => {
            pipeline::run_pipeline(&cfg, &dir)?;
        }
        Command::Sweep { fractions } => {
            for e in pipeline::run_sweep(&cfg, &dir, &fractions)? {
                println!("fraction {:.2}: P = {:.2}%, F = {:.2}%", e.fraction, e.p, e.f);
            }
        }
        stage => {
            save_snapshot(&cfg, &dir)?;
            match stage {
                Command::Synth => pipeline::stage_synth(&cfg, &dir)?,
                Command::TrainTokenizer => pipeline::stage_train_tokenizer(&cfg, &dir)?,
                Command::TrainInfiller => pipeline::stage_train_infiller(&cfg, &dir)?,
                Command::Pair => pipeline::stage_pair(&cfg, &dir)?,
                Command::Edit => pipeline::stage_edit(&cfg, &dir)?,
                Command::TrainClassifier => pipeline::stage_train_classifier(&cfg, &dir)?,
                Command::Eval => {
                    let r = pipeline::stage_eval(&cfg, &dir)?;
                    println!("P = {:.2}%, F = {:.2}% over {} pairs", r.p, r.f, r.per_pair.len());
                }
                Command::Run | Command::Sweep { .. } => unreachable!(),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
