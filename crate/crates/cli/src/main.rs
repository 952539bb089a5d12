//! `visbeam` command-line tool.
//!
//! Exit codes: 0 success, 2 configuration or validation error, 3 runtime
//! failure, 4 I/O error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use visbeam::{Error, ExperimentKind, PipelineMode};

#[derive(Debug, Parser)]
#[command(name = "visbeam", version, about = "Vision-steered microphone-array beamforming")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Scenario file (TOML).
    #[arg(long, short = 'c', global = true)]
    pub config: Option<PathBuf>,

    /// Override the scenario seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Override the output directory.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,

    /// Override the analysis frame length N.
    #[arg(long, global = true)]
    pub frame_length: Option<usize>,

    /// Override the hop H (must be N/2).
    #[arg(long, global = true)]
    pub hop: Option<usize>,

    /// Pipeline scheduling: realtime_paced or as_fast_as_possible.
    #[arg(long, global = true)]
    pub mode: Option<PipelineMode>,

    /// More log output; repeat for debug level.
    #[arg(long, short = 'v', global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render the scenario to a multichannel WAV.
    Synthesize {
        /// Destination WAV; defaults to <out-dir>/scene.wav.
        #[arg(long, short = 'o')]
        output: Option<PathBuf>,
    },
    /// Beamform a recorded multichannel WAV offline.
    Beamform(commands::BeamformArgs),
    /// Sweep the array response over an azimuth/elevation grid.
    Beampattern(commands::BeampatternArgs),
    /// Run the threaded capture/fusion/beamforming pipeline.
    Pipeline,
    /// Run a scripted experiment and write SIR series and summary.
    Experiment {
        /// anechoic_static, anechoic_dynamic or room_dynamic.
        name: ExperimentKind,
    },
    /// Realtime latency benchmark with a per-stage table.
    Bench(commands::BenchArgs),
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Domain(_) | Error::InvalidArgument(_) => 2,
        Error::Aborted(_) => 3,
        Error::Io { .. } | Error::Wav { .. } | Error::Csv(_) => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let g = &cli.global;
    let result = match &cli.command {
        Command::Synthesize { output } => commands::synthesize(g, output.as_deref()),
        Command::Beamform(a) => commands::beamform(g, a),
        Command::Beampattern(a) => commands::beampattern(g, a),
        Command::Pipeline => commands::pipeline(g),
        Command::Experiment { name } => commands::experiment(g, *name),
        Command::Bench(a) => commands::bench(g, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
