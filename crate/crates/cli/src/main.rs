//! `fdia` command-line pipeline: predictor training, dataset generation,
//! offline training, adversarial training, and evaluation.

mod commands;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fdia::config::{ExperimentConfig, Precision};
use fdia::marl::Profile;
use fdia::{Error, Result};

/// Environment variable naming a directory whose `fdia.toml` is used when
/// `--config` is not given.
pub const CONFIG_DIR_ENV: &str = "FDIA_CONFIG_DIR";

#[derive(Parser, Debug)]
#[command(name = "fdia", version, about = "False data injection attack simulator and adversarial training harness")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the configuration file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 1 gives bit-identical reruns. Defaults to all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true, value_enum)]
    precision: Option<PrecisionArg>,
    /// Suppress progress lines on stderr.
    #[arg(long, short, global = true)]
    quiet: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ProfileArg {
    Desk,
    Paper,
}

impl From<ProfileArg> for Profile {
    fn from(p: ProfileArg) -> Self {
        match p {
            ProfileArg::Desk => Profile::Desk,
            ProfileArg::Paper => Profile::Paper,
        }
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train the LSTM state predictor on benign trajectories.
    TrainPredictor {
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate the labeled residual dataset for the offline defender.
    GenOfflineData {
        #[arg(long)]
        predictor: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Episodes per attack fraction.
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Train the supervised offline defender.
    TrainOffline {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train adversary and defender policies against each other.
    TrainMarl {
        #[arg(long)]
        predictor: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Initialize the defender from this offline classifier.
        #[arg(long)]
        warm_start: Option<PathBuf>,
        #[arg(long, value_enum)]
        profile: Option<ProfileArg>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a defender against an attacker.
    Evaluate(EvaluateArgs),
}

#[derive(Args, Debug)]
#[command(group(clap::ArgGroup::new("def").required(true).args(["defender", "offline", "oracle", "uniform_defender"])))]
#[command(group(clap::ArgGroup::new("att").args(["attacker", "time_invariant", "no_attack"])))]
pub struct EvaluateArgs {
    #[arg(long)]
    pub predictor: PathBuf,
    /// Trained defender policy.
    #[arg(long)]
    pub defender: Option<PathBuf>,
    /// Offline classifier used as the defender.
    #[arg(long)]
    pub offline: Option<PathBuf>,
    /// Defender that always answers the true label (self-test).
    #[arg(long)]
    pub oracle: bool,
    /// Defender answering uniformly at random.
    #[arg(long)]
    pub uniform_defender: bool,
    /// Trained adversary policy; uniformly random actions when no attacker is given.
    #[arg(long)]
    pub attacker: Option<PathBuf>,
    /// Scripted c = -1 attack on each bus in turn.
    #[arg(long)]
    pub time_invariant: bool,
    #[arg(long)]
    pub no_attack: bool,
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Also write per-step traces.
    #[arg(long)]
    pub traces: bool,
}

/// Flags > file > defaults. Without `--config`, `$FDIA_CONFIG_DIR/fdia.toml`
/// is used when it exists.
fn effective_config(common: &Common) -> Result<ExperimentConfig> {
    let path = match &common.config {
        Some(p) => Some(p.clone()),
        None => std::env::var_os(CONFIG_DIR_ENV).map(|d| Path::new(&d).join("fdia.toml")).filter(|p| p.exists()),
    };
    let mut cfg = match path {
        Some(p) => {
            if !p.is_file() {
                return Err(Error::Config(format!("config file not found: {}", p.display())));
            }
            ExperimentConfig::load(&p)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(p) = common.precision {
        cfg.precision = match p {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        };
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = effective_config(&cli.common)?;
    if let Command::TrainMarl { profile, epochs, .. } = &cli.command {
        if let Some(p) = profile {
            cfg.train.train_batch = fdia::marl::TrainConfig::profile((*p).into()).train_batch;
        }
        if let Some(e) = epochs {
            cfg.train.epochs = *e;
        }
    }
    cfg.validate()?;
    if let Some(n) = cli.common.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("cannot configure thread pool: {e}")))?;
    }
    let ctx = commands::Context { cfg, quiet: cli.common.quiet, threads: rayon::current_num_threads() };
    match ctx.cfg.precision {
        Precision::F32 => commands::dispatch::<f32>(&ctx, &cli.command),
        Precision::F64 => commands::dispatch::<f64>(&ctx, &cli.command),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}
