//! Command-line surface: dataset generation and ingestion, training,
//! sampling, likelihood scoring, comparison experiments, and SVG
//! rendering of layouts.

mod commands;
mod config;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "layoutvae",
    about = "Stochastic scene layout generation from label sets",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic MNIST-style layout dataset from rules.
    GenData(commands::GenDataArgs),
    /// Convert COCO panoptic annotations into layout streams.
    IngestCoco(commands::IngestCocoArgs),
    /// Train the count or box model on a dataset directory.
    Train(commands::TrainArgs),
    /// Sample full layouts from trained count and box checkpoints.
    Sample(commands::SampleArgs),
    /// Score layouts by negative log-likelihood under a trained model.
    Score(commands::ScoreArgs),
    /// Render layout streams as SVG files.
    Render(commands::RenderArgs),
    /// Run a comparison experiment (ablation, order, latent, flip).
    Experiment(commands::ExperimentArgs),
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(args) => commands::gen_data(args),
        Command::IngestCoco(args) => commands::ingest_coco(args),
        Command::Train(args) => commands::train(args),
        Command::Sample(args) => commands::sample(args),
        Command::Score(args) => commands::score(args),
        Command::Render(args) => commands::render(args),
        Command::Experiment(args) => commands::experiment(args),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
