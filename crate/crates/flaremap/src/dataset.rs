//! Labeled dataset assembly: decode, resize, augment, split, and write.
//!
//! Positives are expanded six-fold with the lossless dihedral transforms
//! (identity, horizontal flip, vertical flip, and the three quarter-turn
//! rotations); negatives are taken as-is. Split assignment happens per
//! source before augmentation, so every variant of one source lands in one
//! split and no augmented copy of a training image can leak into test.
//!
//! All randomness flows from one explicit seed; the same inputs and seed
//! produce a byte-identical manifest.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("pixel buffer length {got} does not match {width}x{height}x{channels}")]
    BufferSize {
        width: u32,
        height: u32,
        channels: u8,
        got: usize,
    },
    #[error("unsupported channel count {0} (1 and 3 are supported)")]
    UnsupportedChannels(u8),
    #[error("the {0} class has no sources")]
    EmptyClass(&'static str),
    #[error("split fractions must be non-negative and sum to 1, got {0:?}")]
    BadFractions([f64; 3]),
    #[error("source id {0:?} appears more than once")]
    DuplicateSource(String),
    #[error("resize target must be at least 1x1, got {0}x{1}")]
    BadResizeTarget(u32, u32),
    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest format error: {0}")]
    Manifest(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// 8-bit raster, row-major, interleaved channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RasterImage {
    width: u32,
    height: u32,
    channels: u8,
    pixels: Vec<u8>,
}

impl RasterImage {
    pub fn new(width: u32, height: u32, channels: u8, pixels: Vec<u8>) -> Result<Self, DatasetError> {
        let expected = width as usize * height as usize * channels as usize;
        if pixels.len() != expected || channels == 0 || width == 0 || height == 0 {
            return Err(DatasetError::BufferSize {
                width,
                height,
                channels,
                got: pixels.len(),
            });
        }
        Ok(RasterImage {
            width,
            height,
            channels,
            pixels,
        })
    }

    pub fn constant(width: u32, height: u32, channels: u8, value: u8) -> Self {
        RasterImage {
            width,
            height,
            channels,
            pixels: vec![value; width as usize * height as usize * channels as usize],
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn channels(&self) -> u8 {
        self.channels
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    #[inline]
    fn index(&self, x: u32, y: u32, ch: u8) -> usize {
        ((y as usize * self.width as usize) + x as usize) * self.channels as usize + ch as usize
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32, ch: u8) -> u8 {
        self.pixels[self.index(x, y, ch)]
    }
}

/// The six lossless transforms, in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugTag {
    Identity,
    Hflip,
    Vflip,
    Rot90,
    Rot180,
    Rot270,
}

impl AugTag {
    pub const ALL: [AugTag; 6] = [
        AugTag::Identity,
        AugTag::Hflip,
        AugTag::Vflip,
        AugTag::Rot90,
        AugTag::Rot180,
        AugTag::Rot270,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AugTag::Identity => "identity",
            AugTag::Hflip => "hflip",
            AugTag::Vflip => "vflip",
            AugTag::Rot90 => "rot90",
            AugTag::Rot180 => "rot180",
            AugTag::Rot270 => "rot270",
        }
    }
}

/// Build an output image by pulling each output pixel from a source
/// coordinate. All six transforms are pure index permutations.
fn permute(
    src: &RasterImage,
    out_w: u32,
    out_h: u32,
    source_of: impl Fn(u32, u32) -> (u32, u32),
) -> RasterImage {
    let channels = src.channels;
    let mut pixels = Vec::with_capacity(out_w as usize * out_h as usize * channels as usize);
    for y in 0..out_h {
        for x in 0..out_w {
            let (sx, sy) = source_of(x, y);
            for ch in 0..channels {
                pixels.push(src.get(sx, sy, ch));
            }
        }
    }
    RasterImage {
        width: out_w,
        height: out_h,
        channels,
        pixels,
    }
}

/// Mirror across the vertical axis: out(x, y) = in(w-1-x, y).
pub fn hflip(img: &RasterImage) -> RasterImage {
    let w = img.width;
    permute(img, img.width, img.height, |x, y| (w - 1 - x, y))
}

/// Mirror across the horizontal axis: out(x, y) = in(x, h-1-y).
pub fn vflip(img: &RasterImage) -> RasterImage {
    let h = img.height;
    permute(img, img.width, img.height, |x, y| (x, h - 1 - y))
}

/// Quarter turn clockwise; output dimensions are swapped.
pub fn rot90(img: &RasterImage) -> RasterImage {
    let h_in = img.height;
    permute(img, img.height, img.width, |x, y| (y, h_in - 1 - x))
}

/// Half turn: out(x, y) = in(w-1-x, h-1-y).
pub fn rot180(img: &RasterImage) -> RasterImage {
    let (w, h) = (img.width, img.height);
    permute(img, w, h, |x, y| (w - 1 - x, h - 1 - y))
}

/// Quarter turn counterclockwise; output dimensions are swapped.
pub fn rot270(img: &RasterImage) -> RasterImage {
    let w_in = img.width;
    permute(img, img.height, img.width, |x, y| (w_in - 1 - y, x))
}

/// The six-fold expansion of one image, tagged, in canonical order. The
/// identity entry is byte-identical to the input.
pub fn augment(img: &RasterImage) -> [(AugTag, RasterImage); 6] {
    [
        (AugTag::Identity, img.clone()),
        (AugTag::Hflip, hflip(img)),
        (AugTag::Vflip, vflip(img)),
        (AugTag::Rot90, rot90(img)),
        (AugTag::Rot180, rot180(img)),
        (AugTag::Rot270, rot270(img)),
    ]
}

/// Bilinear resize with center-aligned sampling.
///
/// Each output pixel samples the source at `(dst + 0.5) * scale - 0.5`,
/// clamped to the source extent; fractional values round half away from
/// zero (so an exact .5 blend of 0 and 255 becomes 128). Resizing to the
/// same dimensions returns a byte-identical copy.
pub fn resize(img: &RasterImage, w: u32, h: u32) -> Result<RasterImage, DatasetError> {
    if w == 0 || h == 0 {
        return Err(DatasetError::BadResizeTarget(w, h));
    }
    if w == img.width && h == img.height {
        return Ok(img.clone());
    }
    let scale_x = img.width as f64 / w as f64;
    let scale_y = img.height as f64 / h as f64;
    let channels = img.channels;
    let mut pixels = Vec::with_capacity(w as usize * h as usize * channels as usize);
    for y in 0..h {
        let src_y = ((y as f64 + 0.5) * scale_y - 0.5).clamp(0.0, (img.height - 1) as f64);
        let y0 = src_y.floor() as u32;
        let y1 = (y0 + 1).min(img.height - 1);
        let fy = src_y - y0 as f64;
        for x in 0..w {
            let src_x = ((x as f64 + 0.5) * scale_x - 0.5).clamp(0.0, (img.width - 1) as f64);
            let x0 = src_x.floor() as u32;
            let x1 = (x0 + 1).min(img.width - 1);
            let fx = src_x - x0 as f64;
            for ch in 0..channels {
                let p00 = img.get(x0, y0, ch) as f64;
                let p10 = img.get(x1, y0, ch) as f64;
                let p01 = img.get(x0, y1, ch) as f64;
                let p11 = img.get(x1, y1, ch) as f64;
                let top = p00 + fx * (p10 - p00);
                let bottom = p01 + fx * (p11 - p01);
                let value = top + fy * (bottom - top);
                pixels.push(value.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    Ok(RasterImage {
        width: w,
        height: h,
        channels,
        pixels,
    })
}

/// PNG decode to an RGB raster (other color types are converted).
pub fn decode_png(bytes: &[u8]) -> Result<RasterImage, DatasetError> {
    let decoded = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?;
    let rgb = decoded.to_rgb8();
    RasterImage::new(rgb.width(), rgb.height(), 3, rgb.into_raw())
}

/// PNG encode. Supports 1- and 3-channel rasters.
pub fn encode_png(img: &RasterImage) -> Result<Vec<u8>, DatasetError> {
    let mut out = std::io::Cursor::new(Vec::new());
    match img.channels {
        1 => {
            let buf = image::GrayImage::from_raw(img.width, img.height, img.pixels.clone())
                .expect("buffer length is validated");
            image::DynamicImage::ImageLuma8(buf).write_to(&mut out, image::ImageFormat::Png)?;
        }
        3 => {
            let buf = image::RgbImage::from_raw(img.width, img.height, img.pixels.clone())
                .expect("buffer length is validated");
            image::DynamicImage::ImageRgb8(buf).write_to(&mut out, image::ImageFormat::Png)?;
        }
        other => return Err(DatasetError::UnsupportedChannels(other)),
    }
    Ok(out.into_inner())
}

pub fn load_png(path: &Path) -> Result<RasterImage, DatasetError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    decode_png(&bytes)
}

pub fn save_png(path: &Path, img: &RasterImage) -> Result<(), DatasetError> {
    let bytes = encode_png(img)?;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io_err(path))?;
    }
    std::fs::write(path, bytes).map_err(io_err(path))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Positive,
    Negative,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Positive => "positive",
            Label::Negative => "negative",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// One input image with its stable identifier (site id, file stem, ...).
#[derive(Debug, Clone)]
pub struct SourceImage {
    pub source_id: String,
    pub image: RasterImage,
}

/// One sample in the written dataset. `path` is relative to the dataset
/// root: `<split>/<label>/<source_id>_<aug_tag>.png`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub label: Label,
    pub source_id: String,
    pub aug_tag: AugTag,
    pub split: Split,
}

/// Manifest header: the reproducibility envelope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub seed: u64,
    pub split_fractions: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub seed: u64,
    pub split_fractions: [f64; 3],
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Clone)]
pub struct DatasetOptions {
    /// Sample dimensions; inputs are bilinearly resized when they differ.
    pub width: u32,
    pub height: u32,
    /// (train, val, test), each non-negative, summing to 1 (tolerance 1e-9).
    pub fractions: [f64; 3],
    pub seed: u64,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        DatasetOptions {
            width: 64,
            height: 64,
            fractions: [0.7, 0.15, 0.15],
            seed: 42,
        }
    }
}

/// Fractions must be non-negative and sum to 1 within 1e-9.
pub fn validate_fractions(fractions: [f64; 3]) -> Result<(), DatasetError> {
    let sum: f64 = fractions.iter().sum();
    if fractions.iter().any(|f| !(*f >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(DatasetError::BadFractions(fractions));
    }
    Ok(())
}

/// Largest-remainder apportionment of `n` items over the three fractions.
/// Exact quotas are floored; leftover seats go to the largest fractional
/// remainders, ties resolved toward the earlier split (train, val, test).
pub fn largest_remainder_counts(n: usize, fractions: [f64; 3]) -> [usize; 3] {
    let quotas: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts: [usize; 3] = [0; 3];
    for (i, q) in quotas.iter().enumerate() {
        counts[i] = q.floor() as usize;
    }
    let mut leftover = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    let mut cursor = 0;
    while leftover > 0 {
        counts[order[cursor % 3]] += 1;
        cursor += 1;
        leftover -= 1;
    }
    counts
}

/// Deterministic split assignment for one class: ids are sorted, shuffled
/// by the provided rng, and dealt into splits by largest-remainder counts.
fn assign_class_splits(
    ids: &[String],
    fractions: [f64; 3],
    rng: &mut ChaCha12Rng,
) -> BTreeMap<String, Split> {
    use rand::seq::SliceRandom;
    let mut sorted: Vec<&String> = ids.iter().collect();
    sorted.sort();
    sorted.shuffle(rng);
    let counts = largest_remainder_counts(sorted.len(), fractions);
    let mut assignment = BTreeMap::new();
    let mut cursor = 0usize;
    for (split, count) in Split::ALL.into_iter().zip(counts) {
        for id in &sorted[cursor..cursor + count] {
            assignment.insert((*id).clone(), split);
        }
        cursor += count;
    }
    assignment
}

fn check_unique_sources(
    positives: &[SourceImage],
    negatives: &[SourceImage],
) -> Result<(), DatasetError> {
    let mut seen = HashSet::new();
    for source in positives.iter().chain(negatives) {
        if !seen.insert(source.source_id.as_str()) {
            return Err(DatasetError::DuplicateSource(source.source_id.clone()));
        }
    }
    Ok(())
}

/// Plan the manifest without touching the filesystem. Positive sources are
/// split first, then negatives, both from one seeded stream; entries are
/// ordered positives-then-negatives, by source id, augmentations in
/// canonical order.
pub fn plan_dataset(
    positive_ids: &[String],
    negative_ids: &[String],
    options: &DatasetOptions,
) -> Result<DatasetManifest, DatasetError> {
    validate_fractions(options.fractions)?;
    if positive_ids.is_empty() {
        return Err(DatasetError::EmptyClass("positive"));
    }
    if negative_ids.is_empty() {
        return Err(DatasetError::EmptyClass("negative"));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(options.seed);
    let positive_splits = assign_class_splits(positive_ids, options.fractions, &mut rng);
    let negative_splits = assign_class_splits(negative_ids, options.fractions, &mut rng);

    let mut entries = Vec::new();
    let mut sorted_pos: Vec<&String> = positive_ids.iter().collect();
    sorted_pos.sort();
    for id in sorted_pos {
        let split = positive_splits[id];
        for tag in AugTag::ALL {
            entries.push(ManifestEntry {
                path: sample_rel_path(split, Label::Positive, id, tag),
                label: Label::Positive,
                source_id: id.clone(),
                aug_tag: tag,
                split,
            });
        }
    }
    let mut sorted_neg: Vec<&String> = negative_ids.iter().collect();
    sorted_neg.sort();
    for id in sorted_neg {
        let split = negative_splits[id];
        entries.push(ManifestEntry {
            path: sample_rel_path(split, Label::Negative, id, AugTag::Identity),
            label: Label::Negative,
            source_id: id.clone(),
            aug_tag: AugTag::Identity,
            split,
        });
    }
    Ok(DatasetManifest {
        seed: options.seed,
        split_fractions: options.fractions,
        entries,
    })
}

/// Relative sample location inside the dataset root.
pub fn sample_rel_path(split: Split, label: Label, source_id: &str, tag: AugTag) -> String {
    format!(
        "{}/{}/{}_{}.png",
        split.as_str(),
        label.as_str(),
        source_id,
        tag.as_str()
    )
}

/// Build and write the dataset under `root`: resized (and, for positives,
/// augmented) PNG samples in `<root>/<split>/<label>/`, plus the manifest
/// at `<root>/manifest.jsonl`. Returns the manifest.
pub fn build_dataset(
    root: &Path,
    positives: &[SourceImage],
    negatives: &[SourceImage],
    options: &DatasetOptions,
) -> Result<DatasetManifest, DatasetError> {
    check_unique_sources(positives, negatives)?;
    let positive_ids: Vec<String> = positives.iter().map(|s| s.source_id.clone()).collect();
    let negative_ids: Vec<String> = negatives.iter().map(|s| s.source_id.clone()).collect();
    let manifest = plan_dataset(&positive_ids, &negative_ids, options)?;

    let by_id: BTreeMap<&str, &RasterImage> = positives
        .iter()
        .chain(negatives)
        .map(|s| (s.source_id.as_str(), &s.image))
        .collect();

    // Resize once per source, then permute; the transforms are lossless so
    // order does not affect which ground pixels a sample contains.
    let mut resized: BTreeMap<&str, RasterImage> = BTreeMap::new();
    for (id, img) in &by_id {
        resized.insert(id, resize(img, options.width, options.height)?);
    }

    for entry in &manifest.entries {
        let base = &resized[entry.source_id.as_str()];
        let sample = match entry.aug_tag {
            AugTag::Identity => base.clone(),
            AugTag::Hflip => hflip(base),
            AugTag::Vflip => vflip(base),
            AugTag::Rot90 => rot90(base),
            AugTag::Rot180 => rot180(base),
            AugTag::Rot270 => rot270(base),
        };
        save_png(&root.join(&entry.path), &sample)?;
    }
    write_manifest(&root.join("manifest.jsonl"), &manifest)?;
    Ok(manifest)
}

/// JSON Lines serialization: one header line, then one line per entry.
pub fn write_manifest(path: &Path, manifest: &DatasetManifest) -> Result<(), DatasetError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io_err(path))?;
    }
    let file = std::fs::File::create(path).map_err(io_err(path))?;
    let mut out = std::io::BufWriter::new(file);
    let header = ManifestHeader {
        seed: manifest.seed,
        split_fractions: manifest.split_fractions,
    };
    writeln!(out, "{}", serde_json::to_string(&header)?).map_err(io_err(path))?;
    for entry in &manifest.entries {
        writeln!(out, "{}", serde_json::to_string(entry)?).map_err(io_err(path))?;
    }
    out.flush().map_err(io_err(path))
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest, DatasetError> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let mut lines = std::io::BufReader::new(file).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| DatasetError::Manifest("empty manifest".to_string()))?
        .map_err(io_err(path))?;
    let header: ManifestHeader = serde_json::from_str(&header_line)?;
    let mut entries = Vec::new();
    for line in lines {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        entries.push(serde_json::from_str(&line)?);
    }
    Ok(DatasetManifest {
        seed: header.seed,
        split_fractions: header.split_fractions,
        entries,
    })
}

/// Per-split class counts and imbalance ratio (max class over min class;
/// absent when a split is missing a class entirely).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitBalance {
    pub positives: u64,
    pub negatives: u64,
    pub imbalance_ratio: Option<f64>,
}

pub fn class_balance_report(manifest: &DatasetManifest) -> BTreeMap<Split, SplitBalance> {
    let mut report = BTreeMap::new();
    for split in Split::ALL {
        let positives = manifest
            .entries
            .iter()
            .filter(|e| e.split == split && e.label == Label::Positive)
            .count() as u64;
        let negatives = manifest
            .entries
            .iter()
            .filter(|e| e.split == split && e.label == Label::Negative)
            .count() as u64;
        let imbalance_ratio = if positives > 0 && negatives > 0 {
            Some(positives.max(negatives) as f64 / positives.min(negatives) as f64)
        } else {
            None
        };
        report.insert(
            split,
            SplitBalance {
                positives,
                negatives,
                imbalance_ratio,
            },
        );
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(width: u32, height: u32, pixels: Vec<u8>) -> RasterImage {
        RasterImage::new(width, height, 1, pixels).unwrap()
    }

    /// Row-major ramp image with no dihedral symmetry.
    fn ramp(width: u32, height: u32, channels: u8) -> RasterImage {
        let n = width as usize * height as usize * channels as usize;
        let pixels = (0..n).map(|i| (i * 7 % 251) as u8).collect();
        RasterImage::new(width, height, channels, pixels).unwrap()
    }

    #[test]
    fn hflip_2x2_swaps_columns() {
        let img = gray(2, 2, vec![1, 2, 3, 4]);
        assert_eq!(hflip(&img).pixels(), &[2, 1, 4, 3]);
    }

    #[test]
    fn vflip_2x2_swaps_rows() {
        let img = gray(2, 2, vec![1, 2, 3, 4]);
        assert_eq!(vflip(&img).pixels(), &[3, 4, 1, 2]);
    }

    #[test]
    fn rot90_turns_row_into_column() {
        // [a b] clockwise-quarter-turns into a column reading a, b downward.
        let img = gray(2, 1, vec![10, 20]);
        let turned = rot90(&img);
        assert_eq!((turned.width(), turned.height()), (1, 2));
        assert_eq!(turned.pixels(), &[10, 20]);
    }

    #[test]
    fn rot180_equals_vflip_of_hflip() {
        let img = ramp(5, 3, 3);
        assert_eq!(rot180(&img), vflip(&hflip(&img)));
    }

    #[test]
    fn dihedral_identities_hold_exactly() {
        let img = ramp(4, 3, 3);
        assert_eq!(hflip(&hflip(&img)), img);
        assert_eq!(vflip(&vflip(&img)), img);
        assert_eq!(rot90(&rot90(&rot90(&rot90(&img)))), img);
        assert_eq!(rot90(&rot270(&img)), img);
        assert_eq!(rot180(&rot180(&img)), img);
    }

    #[test]
    fn augment_yields_six_distinct_tagged_images() {
        let img = ramp(4, 4, 1);
        let out = augment(&img);
        assert_eq!(out.len(), 6);
        assert_eq!(out[0].0, AugTag::Identity);
        assert_eq!(out[0].1, img);
        for i in 0..6 {
            for j in (i + 1)..6 {
                assert_ne!(out[i].1, out[j].1, "{:?} vs {:?}", out[i].0, out[j].0);
            }
        }
    }

    #[test]
    fn augment_preserves_dimensions_modulo_rotation_swap() {
        let img = ramp(6, 4, 3);
        for (tag, out) in augment(&img) {
            match tag {
                AugTag::Rot90 | AugTag::Rot270 => {
                    assert_eq!((out.width(), out.height()), (4, 6));
                }
                _ => assert_eq!((out.width(), out.height()), (6, 4)),
            }
        }
    }

    #[test]
    fn resize_half_blend_rounds_away_from_zero() {
        // 2x2 [[0,0],[255,255]] averaged into one pixel: 127.5 rounds to 128.
        let img = gray(2, 2, vec![0, 0, 255, 255]);
        let out = resize(&img, 1, 1).unwrap();
        assert_eq!(out.pixels(), &[128]);
    }

    #[test]
    fn resize_constant_stays_constant() {
        let img = RasterImage::constant(100, 100, 3, 77);
        let out = resize(&img, 64, 64).unwrap();
        assert_eq!((out.width(), out.height()), (64, 64));
        assert!(out.pixels().iter().all(|&p| p == 77));
    }

    #[test]
    fn resize_to_same_dims_is_byte_identical() {
        let img = ramp(9, 7, 3);
        assert_eq!(resize(&img, 9, 7).unwrap(), img);
    }

    #[test]
    fn resize_rejects_zero_target() {
        let img = ramp(4, 4, 1);
        assert!(matches!(resize(&img, 0, 4), Err(DatasetError::BadResizeTarget(0, 4))));
    }

    #[test]
    fn png_round_trip_preserves_pixels() {
        for channels in [1u8, 3] {
            let img = ramp(11, 5, channels);
            let bytes = encode_png(&img).unwrap();
            assert!(bytes.starts_with(&[0x89, b'P', b'N', b'G']));
            let back = decode_png(&bytes).unwrap();
            // Decoding normalizes to RGB; gray pixels replicate per channel.
            assert_eq!((back.width(), back.height(), back.channels()), (11, 5, 3));
            for y in 0..5 {
                for x in 0..11 {
                    for ch in 0..3 {
                        let expected = if channels == 1 { img.get(x, y, 0) } else { img.get(x, y, ch) };
                        assert_eq!(back.get(x, y, ch), expected);
                    }
                }
            }
        }
    }

    #[test]
    fn largest_remainder_examples() {
        // The documented tie rule sends the spare seat to the earlier split.
        assert_eq!(largest_remainder_counts(10, [0.7, 0.15, 0.15]), [7, 2, 1]);
        assert_eq!(largest_remainder_counts(1, [0.7, 0.15, 0.15]), [1, 0, 0]);
        assert_eq!(largest_remainder_counts(20, [0.7, 0.15, 0.15]), [14, 3, 3]);
        assert_eq!(largest_remainder_counts(0, [0.7, 0.15, 0.15]), [0, 0, 0]);
        assert_eq!(largest_remainder_counts(3, [1.0, 0.0, 0.0]), [3, 0, 0]);
    }

    fn ids(prefix: &str, n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{prefix}{i:04}")).collect()
    }

    #[test]
    fn sixfold_expansion_of_positive_class() {
        // 274 positive sources expand to 1644 positive samples.
        let manifest = plan_dataset(&ids("p", 274), &ids("n", 50), &DatasetOptions::default()).unwrap();
        let positives = manifest.entries.iter().filter(|e| e.label == Label::Positive).count();
        assert_eq!(positives, 1644);
        let negatives = manifest.entries.iter().filter(|e| e.label == Label::Negative).count();
        assert_eq!(negatives, 50);
    }

    #[test]
    fn split_assignment_has_no_source_leakage() {
        let manifest = plan_dataset(&ids("p", 53), &ids("n", 31), &DatasetOptions::default()).unwrap();
        let mut seen: BTreeMap<&str, Split> = BTreeMap::new();
        for entry in &manifest.entries {
            let prior = seen.insert(&entry.source_id, entry.split);
            if let Some(prior) = prior {
                assert_eq!(prior, entry.split, "source {} leaked across splits", entry.source_id);
            }
        }
    }

    #[test]
    fn split_sizes_follow_largest_remainder_per_class() {
        let manifest = plan_dataset(&ids("p", 10), &ids("n", 10), &DatasetOptions::default()).unwrap();
        for label in [Label::Positive, Label::Negative] {
            let per_aug = if label == Label::Positive { 6 } else { 1 };
            let count = |split| {
                manifest
                    .entries
                    .iter()
                    .filter(|e| e.label == label && e.split == split)
                    .count()
            };
            assert_eq!(count(Split::Train), 7 * per_aug);
            assert_eq!(count(Split::Val), 2 * per_aug);
            assert_eq!(count(Split::Test), 1 * per_aug);
        }
    }

    #[test]
    fn plan_is_deterministic_and_seed_sensitive() {
        let opts = DatasetOptions::default();
        let a = plan_dataset(&ids("p", 40), &ids("n", 40), &opts).unwrap();
        let b = plan_dataset(&ids("p", 40), &ids("n", 40), &opts).unwrap();
        assert_eq!(a, b);
        let other = DatasetOptions { seed: 43, ..opts };
        let c = plan_dataset(&ids("p", 40), &ids("n", 40), &other).unwrap();
        assert_ne!(a, c, "different seed must reshuffle some assignment");
    }

    #[test]
    fn empty_class_and_bad_fractions_rejected() {
        let opts = DatasetOptions::default();
        assert!(matches!(
            plan_dataset(&[], &ids("n", 3), &opts),
            Err(DatasetError::EmptyClass("positive"))
        ));
        assert!(matches!(
            plan_dataset(&ids("p", 3), &[], &opts),
            Err(DatasetError::EmptyClass("negative"))
        ));
        let bad = DatasetOptions {
            fractions: [0.5, 0.3, 0.3],
            ..opts
        };
        assert!(matches!(
            plan_dataset(&ids("p", 3), &ids("n", 3), &bad),
            Err(DatasetError::BadFractions(_))
        ));
    }

    #[test]
    fn build_writes_layout_and_manifest_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let positives: Vec<SourceImage> = (0..3)
            .map(|i| SourceImage {
                source_id: format!("site_{i:06}"),
                image: ramp(8, 8, 3),
            })
            .collect();
        let negatives: Vec<SourceImage> = (0..4)
            .map(|i| SourceImage {
                source_id: format!("neg_{i:04}"),
                image: ramp(8, 8, 3),
            })
            .collect();
        let opts = DatasetOptions {
            width: 4,
            height: 4,
            ..DatasetOptions::default()
        };
        let manifest = build_dataset(dir.path(), &positives, &negatives, &opts).unwrap();
        assert_eq!(manifest.entries.len(), 3 * 6 + 4);
        for entry in &manifest.entries {
            let path = dir.path().join(&entry.path);
            assert!(path.is_file(), "missing sample {}", entry.path);
            let img = load_png(&path).unwrap();
            assert_eq!((img.width(), img.height()), (4, 4));
            // Layout: <split>/<label>/<source>_<tag>.png
            let expected = sample_rel_path(entry.split, entry.label, &entry.source_id, entry.aug_tag);
            assert_eq!(entry.path, expected);
        }
        let read_back = read_manifest(&dir.path().join("manifest.jsonl")).unwrap();
        assert_eq!(read_back, manifest);
    }

    #[test]
    fn rebuild_produces_identical_manifest_bytes() {
        let sources: Vec<SourceImage> = (0..5)
            .map(|i| SourceImage {
                source_id: format!("s{i}"),
                image: ramp(6, 6, 3),
            })
            .collect();
        let negs: Vec<SourceImage> = (0..5)
            .map(|i| SourceImage {
                source_id: format!("n{i}"),
                image: ramp(6, 6, 3),
            })
            .collect();
        let opts = DatasetOptions {
            width: 4,
            height: 4,
            ..DatasetOptions::default()
        };
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        build_dataset(dir_a.path(), &sources, &negs, &opts).unwrap();
        build_dataset(dir_b.path(), &sources, &negs, &opts).unwrap();
        let bytes_a = std::fs::read(dir_a.path().join("manifest.jsonl")).unwrap();
        let bytes_b = std::fs::read(dir_b.path().join("manifest.jsonl")).unwrap();
        assert_eq!(bytes_a, bytes_b);
    }

    #[test]
    fn duplicate_source_ids_rejected() {
        let img = ramp(4, 4, 3);
        let dup = vec![
            SourceImage { source_id: "x".into(), image: img.clone() },
            SourceImage { source_id: "x".into(), image: img.clone() },
        ];
        let neg = vec![SourceImage { source_id: "n".into(), image: img.clone() }];
        let dir = tempfile::tempdir().unwrap();
        let err = build_dataset(dir.path(), &dup, &neg, &DatasetOptions::default()).unwrap_err();
        assert!(matches!(err, DatasetError::DuplicateSource(_)));
    }

    #[test]
    fn balance_report_counts_and_ratio() {
        let manifest = plan_dataset(&ids("p", 10), &ids("n", 10), &DatasetOptions::default()).unwrap();
        let report = class_balance_report(&manifest);
        let train = &report[&Split::Train];
        assert_eq!(train.positives, 42);
        assert_eq!(train.negatives, 7);
        assert_eq!(train.imbalance_ratio, Some(6.0));

        // A split missing one class has no defined ratio.
        let lopsided = DatasetManifest {
            seed: 0,
            split_fractions: [1.0, 0.0, 0.0],
            entries: plan_dataset(&ids("p", 2), &ids("n", 1), &DatasetOptions {
                fractions: [1.0, 0.0, 0.0],
                ..DatasetOptions::default()
            })
            .unwrap()
            .entries,
        };
        let report = class_balance_report(&lopsided);
        assert_eq!(report[&Split::Val].positives, 0);
        assert_eq!(report[&Split::Val].imbalance_ratio, None);
    }
}
