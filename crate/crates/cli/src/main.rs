mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use output::Format;

#[derive(Debug, Parser)]
#[command(name = "pillardet", version, about = "Pillar-based LiDAR 3D detection toolkit")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
pub(crate) struct Global {
    /// Built-in profile name (waymo, nuscenes, desk) or a profile TOML file
    #[arg(long, global = true, default_value = "desk")]
    pub(crate) profile: String,
    #[arg(long, global = true, default_value_t = 0)]
    pub(crate) seed: u64,
    /// Output file; stdout when absent
    #[arg(long, global = true)]
    pub(crate) out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value = "text")]
    pub(crate) format: Format,
}

#[derive(Debug, Subcommand)]
pub(crate) enum Command {
    /// Synthesize a scene: writes a cloud to --out and its boxes next to it
    Generate(commands::GenerateArgs),
    /// Group a cloud into pillars and summarize occupancy
    Pillarize(commands::PillarizeArgs),
    /// Encode every pillar of a cloud into a feature vector
    Encode(commands::EncodeArgs),
    /// Write a train-mode checkpoint with random or pass-through weights
    Init(commands::InitArgs),
    /// Collapse a train-mode checkpoint into single-conv layers
    Fuse(commands::FuseArgs),
    /// Analytic backbone MAC and parameter table
    Flops(commands::FlopsArgs),
    /// Run the full detector on a cloud
    Detect(commands::DetectArgs),
    /// Per-stage latency over generated clouds
    Bench(commands::BenchArgs),
    /// Loss breakdown and one gradient step on the head maps
    TrainStep(commands::TrainStepArgs),
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let invariant = err
        .chain()
        .any(|e| e.downcast_ref::<pillardet::Error>().is_some_and(|e| e.is_invariant()));
    if invariant {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(&cli.global, cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
