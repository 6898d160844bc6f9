use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use glrcl::experiment::{cmd_gen_stream, cmd_inspect, cmd_metrics, cmd_run, CliError};

#[derive(Parser)]
#[command(name = "glrcl", version, about = "Generative latent replay continual learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment from a JSON config or a previous run_report.json.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides `output_dir` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Directory of domain_NN_{train,eval}.glrf files replacing the configured stream.
        #[arg(long)]
        stream_files: Option<PathBuf>,
    },
    /// Write a synthetic stream spec out as .glrf train/eval pairs.
    GenStream {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize a .gmm generator or a generator pool file.
    Inspect { file: PathBuf },
    /// Recompute metrics from an accuracy matrix CSV.
    Metrics {
        #[arg(long)]
        matrix: PathBuf,
    },
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run {
            config,
            out,
            stream_files,
        } => {
            let dir = cmd_run(&config, out.as_deref(), stream_files.as_deref())?;
            println!("wrote artifacts to {}", dir.display());
        }
        Command::GenStream { spec, out } => {
            for path in cmd_gen_stream(&spec, &out)? {
                println!("{}", path.display());
            }
        }
        Command::Inspect { file } => print!("{}", cmd_inspect(&file)?),
        Command::Metrics { matrix } => print!("{}", cmd_metrics(&matrix)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GLRCL_LOG", "warn")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("glrcl: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
