//! `widenet`: train, widen, prune, plot, report.
//!
//! Exit codes: 0 success, 2 configuration or input error, 3 numeric failure
//! during training.

use std::process::ExitCode;

use clap::Parser;

use widenet_cli::run::{self, ExpandArgs, PlotArgs, PruneArgs, ReportArgs, TrainArgs};

#[derive(Parser)]
#[command(
    name = "widenet",
    version,
    about = "Width-adaptive neural network training, pruning and plotting"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Subcommand)]
enum Command {
    /// Train a fixed architecture; writes checkpoint, snapshot and record.
    Train(TrainArgs),
    /// Train while growing layer widths from 1, driven by weight drift.
    Expand(ExpandArgs),
    /// Score a trained checkpoint and remove features in importance order.
    Prune(PruneArgs),
    /// Render SVG panels from event logs and prune curves.
    Plot(PlotArgs),
    /// Aggregate multi-seed run records into a topology report.
    Report(ReportArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(args) => run::cmd_train(args),
        Command::Expand(args) => run::cmd_expand(args),
        Command::Prune(args) => run::cmd_prune(args),
        Command::Plot(args) => run::cmd_plot(args),
        Command::Report(args) => run::cmd_report(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                widenet::error::Error::Numeric(_) => 3u8,
                _ => 2u8,
            })
        }
    }
}
