//! Command-line driver: every experiment writes tidy CSV/JSON files, each
//! with a `.config.json` sidecar holding the resolved configuration.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use heston_coevo::config::{ConfigError, GridConfig};
use heston_coevo::{ExperimentConfig, ParamBox};
use thiserror::Error;

pub mod commands;
pub mod output;

#[derive(Debug, Parser)]
#[command(name = "heston-coevo", version, about = "Heston calibration by GA and inverse-network co-evolution")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Master seed; every random stream derives from it
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// GA generations per run
    #[arg(long, global = true)]
    pub generations: Option<usize>,
    /// GA population size
    #[arg(long, global = true)]
    pub population: Option<usize>,
    /// Synthetic surface grid as STRIKESxMATURITIES, e.g. 8x5
    #[arg(long, global = true, value_name = "KxT", value_parser = parse_grid)]
    pub grid: Option<GridConfig>,
    /// Parameter box file with `name = [low, high]` lines
    #[arg(long = "box", global = true, value_name = "FILE")]
    pub box_file: Option<PathBuf>,
    /// Output directory
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,
    /// Worker threads (0 = all cores)
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Check every price against doubled quadrature panels
    #[arg(long, global = true)]
    pub strict_quadrature: bool,
    /// TOML configuration file
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Price one surface on the synthetic grid
    Price {
        /// Parameter file with kappa, lambda, sigma, rho, v0 keys
        #[arg(long, value_name = "FILE")]
        params: Option<PathBuf>,
        /// Flat risk-free rate
        #[arg(long, default_value_t = 0.02)]
        rate: f64,
    },
    /// Plain GA versus coevolution on synthetic targets
    Convergence {
        #[arg(long, default_value_t = 1)]
        trials: usize,
    },
    /// Generations needed to match an L-BFGS reference
    Ttt {
        /// Number of targets (default: experiment.trials)
        #[arg(long)]
        trials: Option<usize>,
        /// Generation budget (default: experiment.ttt_max_generations)
        #[arg(long)]
        max_generations: Option<usize>,
    },
    /// Seeding mode by data source overfitting study
    Overfit {
        #[arg(long, default_value_t = 5)]
        seeds: usize,
    },
    /// Network architecture statistics at checkpoints
    Archstats {
        /// Comma-separated generations (default: experiment.checkpoints)
        #[arg(long, value_delimiter = ',')]
        checkpoints: Option<Vec<usize>>,
    },
    /// Calibrate to an option chain file
    CalibrateReal {
        /// Chain CSV: type,strike,expiry_days and bid,ask or mid
        #[arg(long, value_name = "FILE")]
        chain: PathBuf,
        /// Underlying spot
        #[arg(long)]
        spot: f64,
        /// Rate curve CSV with weeks,rate_percent (default: Treasury curve)
        #[arg(long, value_name = "FILE")]
        rates: Option<PathBuf>,
        /// Ground-truth parameter file; adds relative errors to the progress
        #[arg(long, value_name = "FILE")]
        truth: Option<PathBuf>,
        /// Comma-separated generations (default: experiment.checkpoints)
        #[arg(long, value_delimiter = ',')]
        checkpoints: Option<Vec<usize>>,
    },
    /// Write a model-generated chain, its rate curve and the parameters
    SynthChain {
        /// Parameter file (default: built-in parameters)
        #[arg(long, value_name = "FILE")]
        params: Option<PathBuf>,
        #[arg(long, default_value_t = 5000.0)]
        spot: f64,
        /// Comma-separated expiries in days
        #[arg(long, value_delimiter = ',', default_value = "7,14,30,45,60,91,122,182,255")]
        expiries: Vec<u32>,
        /// Lowest log-moneyness
        #[arg(long, default_value_t = -0.4, allow_hyphen_values = true)]
        min_moneyness: f64,
        /// Highest log-moneyness
        #[arg(long, default_value_t = 0.24, allow_hyphen_values = true)]
        max_moneyness: f64,
        /// Strikes per expiry
        #[arg(long, default_value_t = 21)]
        strikes: usize,
        /// Half bid/ask spread in currency
        #[arg(long, default_value_t = 0.0)]
        half_spread: f64,
        /// Strikes are rounded to multiples of this
        #[arg(long, default_value_t = 5.0)]
        strike_step: f64,
        /// Quotes with a smaller mid are not listed
        #[arg(long, default_value_t = 0.05)]
        min_price: f64,
    },
}

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad configuration or arguments; exit code 2.
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Run(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Run(_) => 1,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

fn parse_grid(s: &str) -> Result<GridConfig, String> {
    let (k, t) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected KxT, got {s:?}"))?;
    let n = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok(GridConfig {
        strikes: n(k)?,
        maturities: n(t)?,
    })
}

/// Configuration after applying the file and then the flags over the
/// defaults.
pub fn resolve(global: &GlobalArgs) -> Result<(ExperimentConfig, ParamBox), CliError> {
    let mut cfg = match &global.config {
        Some(path) => {
            let text = read_text(path).map_err(|e| CliError::Usage(e.to_string()))?;
            ExperimentConfig::from_toml_str(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(s) = global.seed {
        cfg.seed = s;
    }
    if let Some(g) = global.generations {
        cfg.ga.generations = g;
    }
    if let Some(n) = global.population {
        cfg.ga.population_size = n;
    }
    if let Some(g) = global.grid {
        cfg.grid = g;
    }
    if let Some(t) = global.threads {
        cfg.threads = t;
    }
    if global.strict_quadrature {
        cfg.strict_quadrature = true;
    }
    cfg.validate()?;
    let bounds = match &global.box_file {
        Some(path) => {
            let text = read_text(path).map_err(|e| CliError::Usage(e.to_string()))?;
            text.parse::<ParamBox>()
                .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?
        }
        None => ParamBox::standard(),
    };
    Ok((cfg, bounds))
}

pub(crate) fn read_text(path: &Path) -> anyhow::Result<String> {
    std::fs::read_to_string(path).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))
}

/// Runs the parsed command and returns the files written.
pub fn run(cli: &Cli) -> Result<Vec<PathBuf>, CliError> {
    let (cfg, bounds) = resolve(&cli.global)?;
    if cfg.threads > 0 {
        // Fails only when a pool already exists, e.g. on a second call in
        // one process; the existing pool is then kept.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global();
    }
    commands::dispatch(&cli.command, &cfg, &bounds, &cli.global.out)
}
