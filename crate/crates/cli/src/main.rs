use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use swbn_lab::{run, Command, ExperimentConfig};

/// Whitening normalization lab: training comparisons, whitening demos,
/// correlation heatmaps and layer benchmarks, all driven by an INI config.
#[derive(Debug, Parser)]
#[command(name = "swbn-lab", version)]
struct Args {
    /// Experiment config (INI).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory; overrides [output] out_dir.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Log progress at debug level.
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Train one MLP per (norm, seed) and write metrics CSVs.
    Train,
    /// Run the whitening iteration for each criterion and step size.
    WhitenDemo,
    /// Correlation heatmap of a checkpoint's last norm layer.
    Heatmap,
    /// Time single-layer forward+backward passes.
    Bench,
}

fn main() -> ExitCode {
    let args = Args::parse();
    env_logger::Builder::new()
        .filter_level(if args.verbose {
            log::LevelFilter::Debug
        } else {
            log::LevelFilter::Warn
        })
        .parse_default_env()
        .init();

    let command = match args.command {
        Cmd::Train => Command::Train,
        Cmd::WhitenDemo => Command::WhitenDemo,
        Cmd::Heatmap => Command::Heatmap,
        Cmd::Bench => Command::Bench,
    };
    let Some(config) = args.config else {
        eprintln!("error: --config PATH is required");
        return ExitCode::from(2);
    };
    let result = ExperimentConfig::load(&config).and_then(|mut cfg| {
        if let Some(out) = args.out {
            cfg.output.out_dir = out;
        }
        run(command, &cfg)
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
