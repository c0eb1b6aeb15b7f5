use clap::{Args, Parser, Subcommand};
use robustlat::error::{Error, Result};
use robustlat::harness::{self, ExperimentConfig, Options};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "robustlat",
    version,
    about = "Latent-space robustness experiments for discrete image tokenizers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's output_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config's root seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Corpus directory; defaults to the gen-data output of the config.
    #[arg(long)]
    corpus: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic corpus to PNGs plus a manifest.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train the toy tokenizer; resumes from --checkpoint when given.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Stop at this step, keeping the schedule of the configured steps.
        #[arg(long)]
        stop_at: Option<u64>,
    },
    /// rFID and pFID of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and evaluate every variant over several seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Usage histogram, elbow table, projection and Lipschitz exports.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Re-hash a run directory against its run.json.
    Validate { run_dir: PathBuf },
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.validate()?;
    }
    Ok(cfg)
}

fn options(common: &Common, checkpoint: Option<PathBuf>, stop_at: Option<u64>) -> Options {
    Options {
        checkpoint,
        corpus: common.corpus.clone(),
        stop_at,
    }
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("ROBUSTLAT_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("ROBUSTLAT_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(e.to_string()))
}

fn run(cli: Cli) -> Result<i32> {
    init_threads()?;
    let dir = match cli.command {
        Command::GenData { common } => harness::gen_data(&load(&common)?)?,
        Command::Train {
            common,
            checkpoint,
            stop_at,
        } => harness::train(&load(&common)?, &options(&common, checkpoint, stop_at))?,
        Command::Eval { common, checkpoint } => harness::eval(&load(&common)?, &options(&common, checkpoint, None))?,
        Command::Ablate { common } => harness::ablate(&load(&common)?, &options(&common, None, None))?,
        Command::Analyze { common, checkpoint } => {
            harness::analyze(&load(&common)?, &options(&common, checkpoint, None))?
        }
        Command::Validate { run_dir } => {
            let bad = harness::validate(&run_dir)?;
            for m in &bad {
                println!("{m}");
            }
            if bad.is_empty() {
                println!("ok: {}", run_dir.display());
                return Ok(0);
            }
            return Ok(3);
        }
    };
    println!("{}", dir.display());
    Ok(0)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(harness::exit_code(&e) as u8)
        }
    }
}
