use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use flaremap::pipeline::{LockGuard, Pipeline, PipelineError, Stage};

/// Map flaring-related infrastructure from satellite hotspot detections.
#[derive(Parser)]
#[command(name = "flaremap", version, about)]
struct Cli {
    /// Pipeline configuration file (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Log stage progress to stderr.
    #[arg(long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Filter raw detection CSVs down to the canonical hotspot table.
    Ingest,
    /// Group filtered detections into persistent sites.
    Cluster,
    /// Download one map image per site and per configured negative location.
    Fetch,
    /// Build the augmented, split image dataset.
    Dataset,
    /// Train the classifier on the dataset.
    Train,
    /// Score the held-out test split with the trained model.
    Eval,
    /// Write the site catalog as GeoJSON.
    ExportGeojson {
        /// Site catalog to export (defaults to the one in the output directory).
        #[arg(long)]
        catalog: Option<PathBuf>,
    },
    /// Run every stage in order.
    RunAll,
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let config_path = cli.config.ok_or_else(|| {
        PipelineError::Config("--config is required; pass the pipeline JSON file".to_string())
    })?;
    let pipeline = Pipeline::load(&config_path, cli.out.as_deref(), cli.verbose)?;
    let _lock = LockGuard::acquire(pipeline.out_dir())?;
    match cli.command {
        Command::Ingest => pipeline.run_stage(Stage::Ingest, None),
        Command::Cluster => pipeline.run_stage(Stage::Cluster, None),
        Command::Fetch => pipeline.run_stage(Stage::Fetch, None),
        Command::Dataset => pipeline.run_stage(Stage::Dataset, None),
        Command::Train => pipeline.run_stage(Stage::Train, None),
        Command::Eval => pipeline.run_stage(Stage::Eval, None),
        Command::ExportGeojson { catalog } => {
            pipeline.run_stage(Stage::ExportGeojson, catalog.as_deref())
        }
        Command::RunAll => pipeline.run_all(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
