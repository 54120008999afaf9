use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

/// Entropy-regularized portfolio optimization and backtesting.
#[derive(Debug, Parser)]
#[command(name = "entroport", version, about)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// Run configuration JSON; defaults apply for every missing key.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output directory. Without it results go to stdout and no manifest is written.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set alpha.mode=fixed`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Per-asset means, variances, entropies and the sample covariance.
    Stats {
        prices: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Weights on the full history under the entropy-augmented objective.
    Optimize {
        prices: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Rolling-window comparison of the configured strategies.
    Backtest {
        prices: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Backtests of the entropy strategy over a temperature or target-return grid.
    Sweep {
        prices: PathBuf,
        /// Fixed temperatures, comma separated.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required_unless_present = "mc", conflicts_with = "mc")]
        alpha: Option<Vec<f64>>,
        /// Annual target returns, comma separated.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        mc: Option<Vec<f64>>,
        #[command(flatten)]
        common: Common,
    },
    /// Generate a synthetic market from a JSON spec.
    Synth {
        spec: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Re-run a command from its manifest and check the outputs match.
    Replay {
        manifest: PathBuf,
        /// Output directory; defaults to the manifest's directory.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
}
