use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use thinking_lab::cli::{self, CliResult};

#[derive(Parser)]
#[command(name = "thinking-lab", version, about = "Two-segment reasoning RL experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    config: PathBuf,
    /// Override one key, e.g. `--set train.total_steps=50`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a policy and write checkpoints plus a per-step log.
    Train(Common),
    /// Evaluate every thinker/answerer pairing of the given checkpoints.
    Xgen {
        #[command(flatten)]
        common: Common,
        /// Checkpoints; `eval.checkpoints` when omitted.
        checkpoints: Vec<PathBuf>,
    },
    /// Nested sampling coupling statistics for one checkpoint.
    Couple {
        #[command(flatten)]
        common: Common,
        checkpoint: Option<PathBuf>,
    },
    /// Compare analytic surrogate gradients with finite differences.
    Gradcheck(Common),
    /// Compare exact expected rewards with Monte Carlo estimates.
    Oracle {
        #[command(flatten)]
        common: Common,
        checkpoint: Option<PathBuf>,
    },
}

fn run(command: Command) -> CliResult {
    match command {
        Command::Train(c) => cli::cmd_train(&cli::load_config(&c.config, &c.overrides)?),
        Command::Xgen { common, checkpoints } => {
            cli::cmd_xgen(&cli::load_config(&common.config, &common.overrides)?, &checkpoints)
        }
        Command::Couple { common, checkpoint } => cli::cmd_couple(
            &cli::load_config(&common.config, &common.overrides)?,
            checkpoint.as_deref(),
        ),
        Command::Gradcheck(c) => cli::cmd_gradcheck(&cli::load_config(&c.config, &c.overrides)?),
        Command::Oracle { common, checkpoint } => cli::cmd_oracle(
            &cli::load_config(&common.config, &common.overrides)?,
            checkpoint.as_deref(),
        ),
    }
}

fn main() -> ExitCode {
    cli::exit_code(run(Cli::parse().command))
}
