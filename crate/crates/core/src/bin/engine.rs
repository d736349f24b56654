use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use triage_core::checkpoint::{merge_checkpoints, Checkpoint};
use triage_core::service::{self, http, EngineConfig, Mode, ServiceError};
use triage_core::sim::{self, StreamSpec};

#[derive(Parser)]
#[command(name = "engine", version, about = "Adaptive security event prioritization engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Process a stream file, or serve the HTTP API.
    Run {
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        #[arg(long)]
        config: PathBuf,
        /// Tick stream, one JSON object per line. Required in batch mode.
        #[arg(long)]
        stream: Option<PathBuf>,
    },
    #[command(subcommand)]
    Checkpoint(CheckpointCommand),
    /// Write a labelled synthetic stream.
    Simulate {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum CheckpointCommand {
    /// Write the current models, flags and tick marker.
    Export {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Verify a checkpoint against the stored history and install it.
    Import {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    Merge {
        #[arg(long)]
        ours: PathBuf,
        #[arg(long)]
        theirs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn execute(command: Command) -> Result<(), ServiceError> {
    match command {
        Command::Run { mode, config, stream } => {
            let config = EngineConfig::load(&config)?;
            match mode.unwrap_or(config.mode) {
                Mode::Batch => {
                    let stream = stream.ok_or_else(|| ServiceError::Config("batch mode needs --stream".into()))?;
                    let ticks = service::read_stream_file(&stream)?;
                    let stdout = std::io::stdout();
                    service::run_batch(&config, &ticks, stdout.lock())?;
                    Ok(())
                }
                Mode::Online => {
                    let runtime = tokio::runtime::Runtime::new()?;
                    runtime.block_on(http::run_online(&config))
                }
            }
        }
        Command::Checkpoint(CheckpointCommand::Export { config, out }) => {
            let config = EngineConfig::load(&config)?;
            let engine = service::open_engine(&config)?;
            let checkpoint = Checkpoint::from_engine(&engine);
            match out {
                Some(path) => checkpoint.write_file(&path)?,
                None => writeln!(std::io::stdout(), "{}", checkpoint.to_json())?,
            }
            Ok(())
        }
        Command::Checkpoint(CheckpointCommand::Import { config, input }) => {
            let config = EngineConfig::load(&config)?;
            let checkpoint = Checkpoint::read_file(&input)?;
            let history = service::read_history_file(&config.history_path)?;
            let engine = checkpoint.restore(history, config.auto_register_types)?;
            Checkpoint::from_engine(&engine).write_file(&config.checkpoint_path)?;
            Ok(())
        }
        Command::Checkpoint(CheckpointCommand::Merge { ours, theirs, out }) => {
            let merged = merge_checkpoints(&Checkpoint::read_file(&ours)?, &Checkpoint::read_file(&theirs)?)?;
            merged.write_file(&out)?;
            Ok(())
        }
        Command::Simulate { spec, seed, out } => {
            let spec = load_spec(&spec)?;
            let ticks = sim::simulate(&spec, seed.unwrap_or(spec.seed))?;
            match out {
                Some(path) => sim::write_stream(&ticks, std::io::BufWriter::new(std::fs::File::create(path)?))?,
                None => sim::write_stream(&ticks, std::io::stdout().lock())?,
            }
            Ok(())
        }
    }
}

fn load_spec(path: &Path) -> Result<StreamSpec, ServiceError> {
    let text = std::fs::read_to_string(path).map_err(|e| ServiceError::Parse {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    toml::from_str(&text).map_err(|e| ServiceError::Parse {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}
