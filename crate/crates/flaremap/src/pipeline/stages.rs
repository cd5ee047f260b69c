//! The seven pipeline stages. Each stage reads its predecessor's artifacts
//! from the output directory, writes its own, and reports what it touched
//! for the ledger. Stages are individually re-runnable; outputs are
//! deterministic functions of config plus inputs, so a rerun over unchanged
//! inputs reproduces every artifact byte for byte.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cluster::{self, SiteRow};
use crate::dataset::{self, Label, RasterImage, SourceImage, Split};
use crate::imagery::{self, ClientConfig, ImageRequest, ImageryClient};
use crate::ingest::{self, CsvSink, FilterStats, IngestError};
use crate::metrics::EvalReport;
use crate::nn::{self, Model, Sample, Tensor};

use super::{Pipeline, PipelineError, StageOutput};

/// Canonical artifact locations under the output directory.
pub struct Artifacts {
    out: PathBuf,
}

impl Artifacts {
    pub fn new(out: &Path) -> Artifacts {
        Artifacts { out: out.to_path_buf() }
    }

    pub fn filtered_csv(&self) -> PathBuf {
        self.out.join("filtered.csv")
    }

    pub fn filter_stats(&self) -> PathBuf {
        self.out.join("filter_stats.json")
    }

    pub fn site_catalog(&self) -> PathBuf {
        self.out.join("sites.jsonl")
    }

    pub fn images_dir(&self) -> PathBuf {
        self.out.join("images")
    }

    pub fn image(&self, name: &str) -> PathBuf {
        self.images_dir().join(format!("{name}.png"))
    }

    pub fn fetch_report(&self) -> PathBuf {
        self.out.join("fetch_report.json")
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.out.join("dataset")
    }

    pub fn manifest(&self) -> PathBuf {
        self.dataset_dir().join("manifest.jsonl")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.out.join("model.ckpt")
    }

    pub fn history(&self) -> PathBuf {
        self.out.join("history.csv")
    }

    pub fn eval_report(&self) -> PathBuf {
        self.out.join("eval_report.json")
    }

    pub fn geojson(&self) -> PathBuf {
        self.out.join("sites.geojson")
    }
}

/// A predecessor artifact that must already exist; the error names the
/// subcommand that produces it.
fn require_artifact(path: &Path, producer: &'static str) -> Result<(), PipelineError> {
    if path.exists() {
        Ok(())
    } else {
        Err(PipelineError::MissingArtifact {
            artifact: path.display().to_string(),
            producer,
        })
    }
}

fn write_json_pretty<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| PipelineError::Internal(format!("serializing {}: {e}", path.display())))?;
    text.push('\n');
    fs::write(path, text)
        .map_err(|e| PipelineError::Internal(format!("writing {}: {e}", path.display())))
}

/// Catalog reader used by the stages: JSON Lines, one site per line, with
/// the line number in any parse error.
pub fn read_catalog_lines(path: &Path) -> Result<Vec<SiteRow>, PipelineError> {
    let text = fs::read_to_string(path)
        .map_err(|e| PipelineError::Internal(format!("reading {}: {e}", path.display())))?;
    let mut rows: Vec<SiteRow> = Vec::new();
    for (index, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = serde_json::from_str(line).map_err(|e| {
            PipelineError::Data(format!("{} line {}: {e}", path.display(), index + 1))
        })?;
        rows.push(row);
    }
    Ok(rows)
}

/// The fetch targets in deterministic order: catalog sites first, then the
/// configured negatives, each with a stable name that becomes both the
/// image file stem and the dataset source id.
fn fetch_targets(sites: &[SiteRow], negatives: &[[f64; 2]]) -> Vec<(String, f64, f64)> {
    let mut targets = Vec::with_capacity(sites.len() + negatives.len());
    for site in sites {
        targets.push((format!("site{}", site.site_id), site.lon, site.lat));
    }
    for (i, [lon, lat]) in negatives.iter().enumerate() {
        targets.push((format!("neg{i}"), *lon, *lat));
    }
    targets
}

#[derive(Debug, Serialize, Deserialize)]
struct FetchReportRow {
    status: String,
    request_key: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct FetchReport {
    images: BTreeMap<String, FetchReportRow>,
}

/// GeoJSON output types; field order is the serialization order.
#[derive(Debug, Serialize, Deserialize)]
pub struct FeatureCollection {
    #[serde(rename = "type")]
    pub kind: String,
    pub features: Vec<Feature>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Feature {
    #[serde(rename = "type")]
    pub kind: String,
    pub geometry: Geometry,
    pub properties: FeatureProperties,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Geometry {
    #[serde(rename = "type")]
    pub kind: String,
    /// GeoJSON axis order: [longitude, latitude].
    pub coordinates: [f64; 2],
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FeatureProperties {
    pub site_id: u64,
    pub count: u64,
    pub first_seen: chrono::NaiveDate,
    pub last_seen: chrono::NaiveDate,
}

impl Pipeline {
    fn artifacts(&self) -> Artifacts {
        Artifacts::new(&self.config.out_dir)
    }

    /// Filter each satellite file in config order and append the survivors
    /// to one canonical CSV, streaming record by record.
    pub(super) fn stage_ingest(&self) -> Result<StageOutput, PipelineError> {
        let art = self.artifacts();
        let out_path = art.filtered_csv();
        let file = fs::File::create(&out_path)
            .map_err(|e| PipelineError::Internal(format!("creating {}: {e}", out_path.display())))?;
        let mut sink = CsvSink::new(BufWriter::new(file)).map_err(ingest_error)?;

        let mut total = FilterStats::default();
        let mut inputs = Vec::new();
        for (satellite, path) in &self.config.inputs {
            inputs.push(path.clone());
            let mut failure: Option<IngestError> = None;
            let stats = ingest::filter_file_with(path, &self.config.filter, |record| {
                if failure.is_some() {
                    return;
                }
                if record.satellite != *satellite {
                    failure = Some(IngestError::SatelliteMismatch {
                        expected: *satellite,
                        found: record.satellite,
                    });
                    return;
                }
                if let Err(e) = sink.write(&record) {
                    failure = Some(e);
                }
            })
            .map_err(ingest_error)?;
            if let Some(e) = failure {
                return Err(ingest_error(e));
            }
            total.merge(&stats);
        }
        sink.finish().map_err(ingest_error)?;
        write_json_pretty(&art.filter_stats(), &total)?;

        let mut counts = BTreeMap::new();
        counts.insert("rows_read".to_string(), total.rows_read);
        counts.insert("rows_parsed".to_string(), total.rows_parsed);
        counts.insert("rows_rejected_parse".to_string(), total.rows_rejected_parse);
        counts.insert("rows_passed".to_string(), total.rows_passed);
        for (satellite, passed) in &total.per_satellite {
            counts.insert(format!("rows_passed_{satellite}"), *passed);
        }
        Ok(StageOutput {
            inputs,
            outputs: vec![out_path, art.filter_stats()],
            counts,
        })
    }

    pub(super) fn stage_cluster(&self) -> Result<StageOutput, PipelineError> {
        let art = self.artifacts();
        let filtered = art.filtered_csv();
        require_artifact(&filtered, "ingest")?;

        let mut stream = ingest::parse_file(&filtered).map_err(ingest_error)?;
        let mut records = Vec::new();
        while let Some(record) = stream.next() {
            records.push(record);
        }
        let stats = stream.into_stats();
        if stats.rows_rejected_parse > 0 {
            return Err(PipelineError::Internal(format!(
                "{} contains {} malformed rows; rerun ingest",
                filtered.display(),
                stats.rows_rejected_parse
            )));
        }

        let records_in = records.len() as u64;
        let params = cluster::ClusterParams {
            radius_m: self.config.cluster.link_radius_m,
            min_detections: self.config.cluster.min_detections,
        };
        let sites = cluster::cluster_hotspots(records, &params)
            .map_err(|e| PipelineError::Internal(e.to_string()))?;
        let mut sites = cluster::rank_sites(sites, params.min_detections);
        sites.sort_by_key(|s| s.site_id);
        let catalog = art.site_catalog();
        cluster::write_catalog_file(&catalog, &sites)
            .map_err(|e| PipelineError::Internal(e.to_string()))?;

        let mut counts = BTreeMap::new();
        counts.insert("records_in".to_string(), records_in);
        counts.insert("sites".to_string(), sites.len() as u64);
        Ok(StageOutput {
            inputs: vec![filtered],
            outputs: vec![catalog],
            counts,
        })
    }

    /// Download one image per site plus one per configured negative
    /// location, through the cache. Fails fast on the first fetch error.
    pub(super) fn stage_fetch(&self) -> Result<StageOutput, PipelineError> {
        let art = self.artifacts();
        let catalog = art.site_catalog();
        require_artifact(&catalog, "cluster")?;
        let sites = read_catalog_lines(&catalog)?;

        let section = &self.config.imagery;
        let cache_dir = section
            .cache_dir
            .clone()
            .unwrap_or_else(|| self.config.out_dir.join("cache"));
        let client_config = ClientConfig {
            endpoint_template: section.endpoint_template.clone(),
            cache_dir,
            requests_per_minute: section.requests_per_minute,
            max_retries: section.max_retries,
            backoff_base_ms: section.backoff_base_ms,
            timeout_ms: section.timeout_ms,
        };
        let token = imagery::resolve_token(section.token.as_deref());
        let client = ImageryClient::new(client_config, token);

        let images_dir = art.images_dir();
        fs::create_dir_all(&images_dir)
            .map_err(|e| PipelineError::Internal(format!("creating {}: {e}", images_dir.display())))?;

        let mut outputs = Vec::new();
        let mut report = FetchReport { images: BTreeMap::new() };
        let mut from_cache = 0u64;
        let mut network_attempts = 0u64;
        for (name, lon, lat) in fetch_targets(&sites, &section.negative_locations) {
            let request = ImageRequest {
                lon,
                lat,
                zoom: section.zoom,
                width: section.width,
                height: section.height,
                style: section.style.clone(),
            };
            let outcome = client.fetch(&request).map_err(imagery_error)?;
            let target = art.image(&name);
            fs::copy(&outcome.path, &target).map_err(|e| {
                PipelineError::Internal(format!("copying image to {}: {e}", target.display()))
            })?;
            from_cache += outcome.from_cache as u64;
            network_attempts += u64::from(outcome.attempts);
            if !outcome.from_cache {
                outputs.push(outcome.path.clone());
            }
            outputs.push(target);
            report.images.insert(
                name,
                FetchReportRow {
                    status: "ok".to_string(),
                    request_key: outcome.request_key,
                },
            );
        }
        let report_path = art.fetch_report();
        let images = report.images.len() as u64;
        write_json_pretty(&report_path, &report)?;
        outputs.push(report_path);

        let mut counts = BTreeMap::new();
        counts.insert("images".to_string(), images);
        counts.insert("from_cache".to_string(), from_cache);
        counts.insert("network_attempts".to_string(), network_attempts);
        Ok(StageOutput {
            inputs: vec![catalog],
            outputs,
            counts,
        })
    }

    /// Assemble the labeled dataset: site images are positives, configured
    /// locations negatives.
    pub(super) fn stage_dataset(&self) -> Result<StageOutput, PipelineError> {
        let art = self.artifacts();
        let catalog = art.site_catalog();
        require_artifact(&catalog, "cluster")?;
        let sites = read_catalog_lines(&catalog)?;

        let load = |name: String| -> Result<SourceImage, PipelineError> {
            let path = art.image(&name);
            require_artifact(&path, "fetch")?;
            let image = dataset::load_png(&path)
                .map_err(|e| PipelineError::Internal(format!("loading {}: {e}", path.display())))?;
            Ok(SourceImage {
                source_id: name,
                image,
            })
        };
        let mut positives = Vec::with_capacity(sites.len());
        let mut negatives = Vec::with_capacity(self.config.imagery.negative_locations.len());
        let mut inputs = vec![catalog];
        for (name, _, _) in fetch_targets(&sites, &self.config.imagery.negative_locations) {
            let source = load(name.clone())?;
            inputs.push(art.image(&name));
            if name.starts_with("site") {
                positives.push(source);
            } else {
                negatives.push(source);
            }
        }

        let root = art.dataset_dir();
        let manifest = dataset::build_dataset(
            &root,
            &positives,
            &negatives,
            &self.config.dataset.to_options(),
        )
        .map_err(dataset_error)?;

        let mut outputs = vec![art.manifest()];
        for entry in &manifest.entries {
            outputs.push(root.join(&entry.path));
        }
        let mut counts = BTreeMap::new();
        counts.insert("positive_sources".to_string(), positives.len() as u64);
        counts.insert("negative_sources".to_string(), negatives.len() as u64);
        counts.insert("entries".to_string(), manifest.entries.len() as u64);
        for split in Split::ALL {
            let n = manifest.entries.iter().filter(|e| e.split == split).count() as u64;
            counts.insert(format!("entries_{}", split.as_str()), n);
        }
        Ok(StageOutput {
            inputs,
            outputs,
            counts,
        })
    }

    fn load_split_samples(&self, split: Split) -> Result<Vec<Sample>, PipelineError> {
        let art = self.artifacts();
        let manifest = dataset::read_manifest(&art.manifest()).map_err(dataset_error)?;
        let root = art.dataset_dir();
        let mut samples = Vec::new();
        for entry in manifest.entries.iter().filter(|e| e.split == split) {
            let path = root.join(&entry.path);
            let image = dataset::load_png(&path)
                .map_err(|e| PipelineError::Internal(format!("loading {}: {e}", path.display())))?;
            samples.push(Sample {
                input: image_tensor(&image),
                label: if entry.label == Label::Positive { 1.0 } else { 0.0 },
            });
        }
        Ok(samples)
    }

    pub(super) fn stage_train(&self) -> Result<StageOutput, PipelineError> {
        let art = self.artifacts();
        require_artifact(&art.manifest(), "dataset")?;

        let train_set = self.load_split_samples(Split::Train)?;
        let val_set = self.load_split_samples(Split::Val)?;
        let input_shape = [
            3,
            self.config.dataset.height as usize,
            self.config.dataset.width as usize,
        ];
        let mut model = Model::init(input_shape, &self.config.model, self.config.train.seed)
            .map_err(nn_error)?;
        let report = nn::train(&mut model, &train_set, &val_set, &self.config.train).map_err(nn_error)?;

        nn::save_checkpoint(&model, &art.checkpoint()).map_err(nn_error)?;
        nn::write_history_csv(&art.history(), &report.history).map_err(nn_error)?;

        let mut counts = BTreeMap::new();
        counts.insert("train_samples".to_string(), train_set.len() as u64);
        counts.insert("val_samples".to_string(), val_set.len() as u64);
        counts.insert("epochs_run".to_string(), report.history.len() as u64);
        counts.insert("best_epoch".to_string(), report.best_epoch as u64);
        counts.insert("stopped_early".to_string(), u64::from(report.stopped_early));
        Ok(StageOutput {
            inputs: vec![art.manifest()],
            outputs: vec![art.checkpoint(), art.history()],
            counts,
        })
    }

    pub(super) fn stage_eval(&self) -> Result<StageOutput, PipelineError> {
        let art = self.artifacts();
        require_artifact(&art.manifest(), "dataset")?;
        require_artifact(&art.checkpoint(), "train")?;

        let model = nn::load_checkpoint(&art.checkpoint()).map_err(nn_error)?;
        let expected_shape = [
            3,
            self.config.dataset.height as usize,
            self.config.dataset.width as usize,
        ];
        if model.input_shape() != expected_shape {
            return Err(PipelineError::Data(format!(
                "checkpoint expects input shape {:?} but the dataset is configured for {:?}",
                model.input_shape(),
                expected_shape
            )));
        }

        let test_set = self.load_split_samples(Split::Test)?;
        if test_set.is_empty() {
            return Err(PipelineError::Data(
                "test split is empty; adjust dataset.fractions".to_string(),
            ));
        }
        let scores = nn::score_samples(&model, &test_set, self.config.train.batch_size).map_err(nn_error)?;
        let labels: Vec<f64> = test_set.iter().map(|s| s.label).collect();
        let loss = nn::bce_loss(&scores, &labels).map_err(nn_error)?;
        let report = EvalReport::from_scores(loss, &scores, &labels, self.config.eval.threshold)
            .map_err(metrics_error)?;
        write_json_pretty(&art.eval_report(), &report)?;
        print!("{}", report.to_text_table());

        let mut counts = BTreeMap::new();
        counts.insert("test_samples".to_string(), test_set.len() as u64);
        counts.insert("tp".to_string(), report.confusion.tp);
        counts.insert("fp".to_string(), report.confusion.fp);
        counts.insert("tn".to_string(), report.confusion.tn);
        counts.insert("fn".to_string(), report.confusion.r#fn);
        Ok(StageOutput {
            inputs: vec![art.manifest(), art.checkpoint()],
            outputs: vec![art.eval_report()],
            counts,
        })
    }

    pub(super) fn stage_export_geojson(&self, catalog_override: Option<&Path>) -> Result<StageOutput, PipelineError> {
        let art = self.artifacts();
        let catalog = catalog_override
            .map(Path::to_path_buf)
            .unwrap_or_else(|| art.site_catalog());
        require_artifact(&catalog, "cluster")?;
        let mut sites = read_catalog_lines(&catalog)?;
        sites.sort_by_key(|s| s.site_id);

        let collection = FeatureCollection {
            kind: "FeatureCollection".to_string(),
            features: sites
                .iter()
                .map(|site| Feature {
                    kind: "Feature".to_string(),
                    geometry: Geometry {
                        kind: "Point".to_string(),
                        coordinates: [site.lon, site.lat],
                    },
                    properties: FeatureProperties {
                        site_id: site.site_id,
                        count: site.count,
                        first_seen: site.first_seen,
                        last_seen: site.last_seen,
                    },
                })
                .collect(),
        };
        let path = art.geojson();
        write_json_pretty(&path, &collection)?;

        let mut counts = BTreeMap::new();
        counts.insert("features".to_string(), collection.features.len() as u64);
        Ok(StageOutput {
            inputs: vec![catalog],
            outputs: vec![path],
            counts,
        })
    }
}

/// Planar NCHW tensor from an interleaved 8-bit image, scaled to [0, 1].
fn image_tensor(image: &RasterImage) -> Tensor {
    let (w, h, c) = (
        image.width() as usize,
        image.height() as usize,
        image.channels() as usize,
    );
    let mut data = vec![0.0; c * h * w];
    let pixels = image.pixels();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                data[(ch * h + y) * w + x] = pixels[(y * w + x) * c + ch] as f64 / 255.0;
            }
        }
    }
    Tensor::new(vec![c, h, w], data).expect("length matches shape by construction")
}

// Error-to-exit-class mapping. Broken input data and configuration are the
// user's to fix (exit 2); service failures are upstream (exit 3); local
// I/O and numerical failures are internal (exit 1).

fn ingest_error(e: IngestError) -> PipelineError {
    match e {
        IngestError::Io { .. } | IngestError::Write(_) => PipelineError::Internal(e.to_string()),
        IngestError::Schema { .. } | IngestError::Csv(_) | IngestError::SatelliteMismatch { .. } => {
            PipelineError::Data(e.to_string())
        }
    }
}

fn imagery_error(e: imagery::ImageryError) -> PipelineError {
    use imagery::ImageryError::*;
    match e {
        MissingToken => PipelineError::Config(e.to_string()),
        Auth { .. } => PipelineError::Config(e.to_string()),
        Upstream { .. } | Client { .. } | Network { .. } | InvalidImage { .. } => {
            PipelineError::Upstream(e.to_string())
        }
        Cache { .. } => PipelineError::Internal(e.to_string()),
    }
}

fn dataset_error(e: dataset::DatasetError) -> PipelineError {
    use dataset::DatasetError::*;
    match e {
        EmptyClass(_) | BadFractions(_) | DuplicateSource(_) | BadResizeTarget(..) | Manifest(_) => {
            PipelineError::Data(e.to_string())
        }
        _ => PipelineError::Internal(e.to_string()),
    }
}

fn nn_error(e: nn::NnError) -> PipelineError {
    use nn::NnError::*;
    match e {
        Config(_) | BadLabel(_) | EmptySplit(_) => PipelineError::Data(e.to_string()),
        _ => PipelineError::Internal(e.to_string()),
    }
}

fn metrics_error(e: crate::metrics::MetricsError) -> PipelineError {
    use crate::metrics::MetricsError::*;
    match e {
        SingleClass(_) | Empty | BadLabel(_) | BadThreshold(_) => PipelineError::Data(e.to_string()),
        _ => PipelineError::Internal(e.to_string()),
    }
}
