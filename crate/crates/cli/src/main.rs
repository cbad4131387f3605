//! `reduce`: pretrain, profile, select, retrain and fleet-compare from one
//! JSON config.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use reduce_core::error::SelectError;
use reduce_core::resilience::Statistic;

#[derive(Debug, Parser)]
#[command(
    name = "reduce",
    version,
    about = "Resilience-driven fault-aware retraining"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalOpts,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalOpts {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory; overrides `output_dir` in the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Master seed; overrides `seed` in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads. Results do not depend on it.
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the fault-free network and record its baseline accuracy.
    Pretrain,
    /// Build the resilience table by fault injection and masked retraining.
    Profile {
        /// Pre-trained parameters [default: <out>/params.json].
        #[arg(long)]
        params: Option<PathBuf>,
    },
    /// Print the retraining budget for one chip's fault map.
    Select {
        #[arg(long)]
        table: PathBuf,
        #[arg(long)]
        fault_map: PathBuf,
        #[arg(long, default_value = "max")]
        statistic: Statistic,
    },
    /// Retrain for one chip with its fault-aware pruning masks enforced.
    Retrain {
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        fault_map: PathBuf,
        #[arg(long)]
        epochs: usize,
    },
    /// Run retraining policies over a simulated fleet and compare them.
    Fleet {
        #[arg(long)]
        params: Option<PathBuf>,
        /// Resilience table [default: <out>/resilience.json].
        #[arg(long)]
        table: Option<PathBuf>,
        /// Comma-separated policies, e.g. `reduce:max,fixed:5,fixed:hi`.
        #[arg(long, value_delimiter = ',')]
        policies: Vec<String>,
    },
    /// Generate a random fault map for the configured array.
    FaultMap {
        #[arg(long)]
        rate: f64,
        #[arg(long, default_value_t = 0)]
        map_seed: u64,
        /// Destination [default: <out>/fault_map.json].
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Select(#[from] SelectError),

    #[error("{0}")]
    Unrecoverable(String),

    #[error(transparent)]
    Core(#[from] reduce_core::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        use reduce_core::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::Select(SelectError::RateBeyondProfile { .. }) => 3,
            CliError::Select(_) | CliError::Unrecoverable(_) => 4,
            CliError::Core(E::Select(SelectError::RateBeyondProfile { .. })) => 3,
            CliError::Core(E::Select(_)) => 4,
            CliError::Core(E::Io { .. } | E::Json(_) | E::Csv(_) | E::Idx(_)) => 5,
            CliError::Core(_) => 2,
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let global = cli.global;
    let pool = {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(jobs) = global.jobs {
            if jobs == 0 {
                return Err(CliError::Usage("--jobs must be >= 1".into()));
            }
            builder = builder.num_threads(jobs);
        }
        builder
            .build()
            .map_err(|e| CliError::Usage(format!("cannot start worker pool: {e}")))?
    };
    pool.install(|| match cli.command {
        Command::Pretrain => commands::pretrain(&global),
        Command::Profile { params } => commands::profile(&global, params),
        Command::Select {
            table,
            fault_map,
            statistic,
        } => commands::select(&table, &fault_map, statistic),
        Command::Retrain {
            params,
            fault_map,
            epochs,
        } => commands::retrain(&global, params, &fault_map, epochs),
        Command::Fleet {
            params,
            table,
            policies,
        } => commands::fleet(&global, params, table, policies),
        Command::FaultMap {
            rate,
            map_seed,
            output,
        } => commands::fault_map(&global, rate, map_seed, output),
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}
