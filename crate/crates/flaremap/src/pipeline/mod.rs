//! End-to-end orchestration: configuration, the stage graph, the run
//! ledger, and the single-run lock. The CLI binary is a thin wrapper over
//! [`Pipeline`].

pub mod config;
pub mod ledger;
pub mod stages;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use thiserror::Error;

pub use config::PipelineConfig;
pub use ledger::{append_entry, ledger_path, read_ledger, LedgerEntry, LockGuard};
pub use stages::{read_catalog_lines, Artifacts, Feature, FeatureCollection, FeatureProperties, Geometry};

/// Failure classes map one-to-one onto process exit codes: internal faults
/// exit 1, problems the user can fix in config or inputs exit 2, upstream
/// service failures exit 3.
#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{0}")]
    Config(String),
    #[error("missing {artifact}; run `flaremap {producer}` first")]
    MissingArtifact {
        artifact: String,
        producer: &'static str,
    },
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Upstream(String),
    #[error("{0}")]
    Internal(String),
    #[error("{stage}: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<PipelineError>,
    },
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) | PipelineError::MissingArtifact { .. } | PipelineError::Data(_) => 2,
            PipelineError::Upstream(_) => 3,
            PipelineError::Internal(_) => 1,
            PipelineError::Stage { source, .. } => source.exit_code(),
        }
    }
}

/// The stages in dependency order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Ingest,
    Cluster,
    Fetch,
    Dataset,
    Train,
    Eval,
    ExportGeojson,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Ingest,
        Stage::Cluster,
        Stage::Fetch,
        Stage::Dataset,
        Stage::Train,
        Stage::Eval,
        Stage::ExportGeojson,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Cluster => "cluster",
            Stage::Fetch => "fetch",
            Stage::Dataset => "dataset",
            Stage::Train => "train",
            Stage::Eval => "eval",
            Stage::ExportGeojson => "export_geojson",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// What a stage reports back for the ledger.
pub(crate) struct StageOutput {
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub counts: BTreeMap<String, u64>,
}

pub struct Pipeline {
    pub config: PipelineConfig,
    pub config_hash: String,
    pub verbose: bool,
}

impl Pipeline {
    /// Loads and validates the config; `out_override` replaces its output
    /// directory before anything else looks at it.
    pub fn load(config_path: &Path, out_override: Option<&Path>, verbose: bool) -> Result<Pipeline, PipelineError> {
        let (config, config_hash) = PipelineConfig::load(config_path, out_override)?;
        Ok(Pipeline {
            config,
            config_hash,
            verbose,
        })
    }

    pub fn out_dir(&self) -> &Path {
        &self.config.out_dir
    }

    /// Runs one stage, timing it and appending a ledger entry on success.
    pub fn run_stage(&self, stage: Stage, catalog_override: Option<&Path>) -> Result<(), PipelineError> {
        std::fs::create_dir_all(self.out_dir()).map_err(|e| {
            PipelineError::Internal(format!("creating {}: {e}", self.out_dir().display()))
        })?;
        if self.verbose {
            eprintln!("[{stage}] starting");
        }
        let started = Instant::now();
        let result = match stage {
            Stage::Ingest => self.stage_ingest(),
            Stage::Cluster => self.stage_cluster(),
            Stage::Fetch => self.stage_fetch(),
            Stage::Dataset => self.stage_dataset(),
            Stage::Train => self.stage_train(),
            Stage::Eval => self.stage_eval(),
            Stage::ExportGeojson => self.stage_export_geojson(catalog_override),
        };
        let output = result.map_err(|source| PipelineError::Stage {
            stage,
            source: Box::new(source),
        })?;
        let wall_ms = started.elapsed().as_millis() as u64;

        let entry = LedgerEntry {
            stage: stage.name().to_string(),
            inputs: output.inputs.iter().map(|p| self.display_path(p)).collect(),
            outputs: output.outputs.iter().map(|p| self.display_path(p)).collect(),
            counts: output.counts,
            wall_ms,
            config_hash: self.config_hash.clone(),
        };
        append_entry(self.out_dir(), &entry)?;
        if self.verbose {
            eprintln!("[{stage}] done in {wall_ms} ms");
        }
        Ok(())
    }

    /// Runs every stage in order, stopping at the first failure.
    pub fn run_all(&self) -> Result<(), PipelineError> {
        for stage in Stage::ALL {
            self.run_stage(stage, None)?;
        }
        Ok(())
    }

    /// Ledger paths are relative to the output directory where possible, so
    /// the ledger reads the same no matter where the tree lives.
    fn display_path(&self, path: &Path) -> String {
        match path.strip_prefix(self.out_dir()) {
            Ok(rel) => rel.display().to_string(),
            Err(_) => path.display().to_string(),
        }
    }
}
