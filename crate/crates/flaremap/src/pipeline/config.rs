//! Pipeline configuration: one JSON file validated as a whole before any
//! stage runs.
//!
//! Relative paths inside the file resolve against the directory containing
//! the config file, so a config travels with its fixtures. The output
//! directory can be overridden with the `--out` flag.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{self, DatasetOptions};
use crate::ingest::{FilterCriteria, Satellite};
use crate::nn::{LayerSpec, Model, TrainConfig};
use crate::tiles::MAX_ZOOM;

use super::PipelineError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Root for every artifact this pipeline writes.
    pub out_dir: PathBuf,
    /// Active-fire CSV per satellite; each file must contain only records
    /// from its declared satellite.
    pub inputs: BTreeMap<Satellite, PathBuf>,
    pub filter: FilterCriteria,
    pub cluster: ClusterSection,
    pub imagery: ImagerySection,
    pub dataset: DatasetSection,
    pub train: TrainConfig,
    /// Classifier architecture; the default is a small three-block conv
    /// net sized for the default 64x64 samples.
    pub model: Vec<LayerSpec>,
    pub eval: EvalSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            out_dir: PathBuf::from("out"),
            inputs: BTreeMap::new(),
            filter: FilterCriteria::default(),
            cluster: ClusterSection::default(),
            imagery: ImagerySection::default(),
            dataset: DatasetSection::default(),
            train: TrainConfig::default(),
            model: default_architecture(),
            eval: EvalSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterSection {
    pub link_radius_m: f64,
    /// Sites with fewer detections are dropped from the catalog.
    pub min_detections: u64,
}

impl Default for ClusterSection {
    fn default() -> Self {
        let defaults = crate::cluster::ClusterParams::default();
        ClusterSection {
            link_radius_m: defaults.radius_m,
            min_detections: defaults.min_detections,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImagerySection {
    /// URL template with {lon} {lat} {zoom} {width} {height} {style} and
    /// optionally {token} placeholders.
    pub endpoint_template: String,
    pub style: String,
    pub zoom: u8,
    pub width: u32,
    pub height: u32,
    /// Secret. The OGINFRA_API_TOKEN environment variable overrides this
    /// field; neither value ever reaches logs, cache keys, or the ledger.
    pub token: Option<String>,
    /// Defaults to `<out_dir>/cache`.
    pub cache_dir: Option<PathBuf>,
    pub requests_per_minute: u32,
    pub max_retries: u32,
    pub backoff_base_ms: u64,
    pub timeout_ms: u64,
    /// [lon, lat] pairs photographed as the negative (no-flare) class.
    pub negative_locations: Vec<[f64; 2]>,
}

impl Default for ImagerySection {
    fn default() -> Self {
        ImagerySection {
            endpoint_template: String::new(),
            style: "satellite-v9".to_string(),
            zoom: 15,
            width: 1000,
            height: 1000,
            token: None,
            cache_dir: None,
            requests_per_minute: 30,
            max_retries: 3,
            backoff_base_ms: 500,
            timeout_ms: 30_000,
            negative_locations: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub width: u32,
    pub height: u32,
    pub fractions: [f64; 3],
    pub seed: u64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        let defaults = DatasetOptions::default();
        DatasetSection {
            width: defaults.width,
            height: defaults.height,
            fractions: defaults.fractions,
            seed: defaults.seed,
        }
    }
}

impl DatasetSection {
    pub fn to_options(&self) -> DatasetOptions {
        DatasetOptions {
            width: self.width,
            height: self.height,
            fractions: self.fractions,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub threshold: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { threshold: 0.5 }
    }
}

/// Three conv blocks then a single sigmoid unit. With 64x64 inputs the
/// flattened tail is 8 channels on an 8x8 grid.
pub fn default_architecture() -> Vec<LayerSpec> {
    vec![
        LayerSpec::Conv2d { out_channels: 4, kernel: 3, stride: 1, padding: 1 },
        LayerSpec::Relu,
        LayerSpec::MaxPool2d { size: 2, stride: 2 },
        LayerSpec::Conv2d { out_channels: 8, kernel: 3, stride: 1, padding: 1 },
        LayerSpec::Relu,
        LayerSpec::MaxPool2d { size: 2, stride: 2 },
        LayerSpec::Conv2d { out_channels: 8, kernel: 3, stride: 1, padding: 1 },
        LayerSpec::Relu,
        LayerSpec::MaxPool2d { size: 2, stride: 2 },
        LayerSpec::Flatten,
        LayerSpec::Dense { units: 1 },
        LayerSpec::Sigmoid,
    ]
}

impl PipelineConfig {
    /// Parse the config file, resolve relative paths against its directory,
    /// and apply the optional output-directory override. The returned hash
    /// identifies the effective configuration.
    pub fn load(path: &Path, out_override: Option<&Path>) -> Result<(PipelineConfig, String), PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut config: PipelineConfig = serde_json::from_str(&text)
            .map_err(|e| PipelineError::Config(format!("config {}: {e}", path.display())))?;
        if let Some(out) = out_override {
            config.out_dir = out.to_path_buf();
        }
        let hash = config.semantic_hash()?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        config.resolve_paths(base);
        config.validate()?;
        Ok((config, hash))
    }

    fn resolve_paths(&mut self, base: &Path) {
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&p);
            }
        };
        resolve(&mut self.out_dir);
        for path in self.inputs.values_mut() {
            resolve(path);
        }
        if let Some(dir) = &mut self.imagery.cache_dir {
            resolve(dir);
        }
    }

    /// SHA-256 over the canonical JSON form (sorted keys, no whitespace) of
    /// the effective config. The token is replaced by null first: the hash
    /// lands in the ledger, and secrets must not be derivable from
    /// artifacts. Formatting and key order in the file do not affect the
    /// hash; any semantic field change does.
    pub fn semantic_hash(&self) -> Result<String, PipelineError> {
        let mut value = serde_json::to_value(self)
            .map_err(|e| PipelineError::Internal(format!("config serialization: {e}")))?;
        if let Some(imagery) = value.get_mut("imagery").and_then(|v| v.as_object_mut()) {
            imagery.insert("token".to_string(), serde_json::Value::Null);
        }
        // serde_json object maps iterate in sorted key order, so to_string
        // of the Value tree is already canonical.
        let canonical = value.to_string();
        let digest = Sha256::digest(canonical.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    /// Whole-config validation, run before any stage.
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |msg: String| Err(PipelineError::Config(msg));

        if self.inputs.is_empty() {
            return bad("inputs: at least one satellite CSV is required".to_string());
        }
        for (satellite, path) in &self.inputs {
            if !path.is_file() {
                return bad(format!("inputs.{satellite}: {} does not exist", path.display()));
            }
        }
        if self.filter.accepted_confidence.is_empty() {
            return bad("filter.accepted_confidence must not be empty".to_string());
        }
        if !self.cluster.link_radius_m.is_finite() || self.cluster.link_radius_m <= 0.0 {
            return bad(format!("cluster.link_radius_m must be positive, got {}", self.cluster.link_radius_m));
        }

        let imagery = &self.imagery;
        if imagery.endpoint_template.is_empty() {
            return bad("imagery.endpoint_template is required".to_string());
        }
        for placeholder in ["{lon}", "{lat}", "{zoom}", "{width}", "{height}", "{style}"] {
            if !imagery.endpoint_template.contains(placeholder) {
                return bad(format!("imagery.endpoint_template is missing the {placeholder} placeholder"));
            }
        }
        if imagery.zoom > MAX_ZOOM {
            return bad(format!("imagery.zoom {} exceeds maximum {MAX_ZOOM}", imagery.zoom));
        }
        if imagery.width == 0 || imagery.height == 0 {
            return bad("imagery.width and imagery.height must be positive".to_string());
        }
        for (i, [lon, lat]) in imagery.negative_locations.iter().enumerate() {
            if !lon.is_finite() || !lat.is_finite() || *lat < -90.0 || *lat > 90.0 {
                return bad(format!(
                    "imagery.negative_locations[{i}]: [{lon}, {lat}] is not a valid lon/lat pair"
                ));
            }
        }

        if self.dataset.width == 0 || self.dataset.height == 0 {
            return bad("dataset.width and dataset.height must be positive".to_string());
        }
        dataset::validate_fractions(self.dataset.fractions)
            .map_err(|e| PipelineError::Config(format!("dataset.fractions: {e}")))?;

        self.train
            .validate()
            .map_err(|e| PipelineError::Config(format!("train: {e}")))?;

        if !self.eval.threshold.is_finite() || !(0.0..=1.0).contains(&self.eval.threshold) {
            return bad(format!("eval.threshold must be in [0, 1], got {}", self.eval.threshold));
        }

        // The architecture must compose over the configured sample shape
        // and end in a single unit.
        let input_shape = [3, self.dataset.height as usize, self.dataset.width as usize];
        let model = Model::with_zero_params(input_shape, &self.model)
            .map_err(|e| PipelineError::Config(format!("model: {e}")))?;
        let probe = crate::nn::Tensor::zeros(&[1, input_shape[0], input_shape[1], input_shape[2]]);
        let out_shape = model
            .forward(&probe)
            .map_err(|e| PipelineError::Config(format!("model: {e}")))?
            .output()
            .shape()
            .to_vec();
        if out_shape != [1, 1] {
            return bad(format!(
                "model must end in a single unit over flattened features; output shape is {out_shape:?}"
            ));
        }
        Ok(())
    }
}
