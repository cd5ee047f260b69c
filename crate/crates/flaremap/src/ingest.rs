//! FIRMS VIIRS active-fire CSV ingestion and constraint filtering.
//!
//! Input files are RFC-4180-style CSV, UTF-8, comma-delimited, first row a
//! header. Two header dialects are accepted for the brightness channels:
//! `brightness`/`bright_t31` and the official VIIRS product names
//! `bright_ti4`/`bright_ti5`. Parsing is streaming: memory use is constant
//! in row count, and malformed rows are counted and skipped rather than
//! aborting the stream.
//!
//! The canonical output dialect re-serializes records with the fixed column
//! order [`CANONICAL_HEADER`]; `parse ∘ serialize` is the identity on valid
//! records.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Canonical CSV column order for re-serialized records. `frp` and
/// `daynight` are optional on input and empty when absent.
pub const CANONICAL_HEADER: [&str; 10] = [
    "latitude",
    "longitude",
    "brightness",
    "bright_t31",
    "confidence",
    "acq_date",
    "acq_time",
    "satellite",
    "frp",
    "daynight",
];

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unrecognizable header: missing required column(s) {missing:?}")]
    Schema { missing: Vec<String> },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("run tagged {expected} contains a record tagged {found}")]
    SatelliteMismatch { expected: Satellite, found: Satellite },
    #[error("write error: {0}")]
    Write(#[source] std::io::Error),
}

/// Per-detection quality flag, parsed case-insensitively from 'l'/'n'/'h'.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Confidence {
    Low,
    Nominal,
    High,
}

impl Confidence {
    pub fn parse(token: &str) -> Option<Self> {
        match token.trim().to_ascii_lowercase().as_str() {
            "l" => Some(Confidence::Low),
            "n" => Some(Confidence::Nominal),
            "h" => Some(Confidence::High),
            _ => None,
        }
    }

    /// Single-letter code used by the canonical CSV dialect.
    pub fn code(self) -> &'static str {
        match self {
            Confidence::Low => "l",
            Confidence::Nominal => "n",
            Confidence::High => "h",
        }
    }
}

/// Source satellite of a detection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Satellite {
    SuomiNpp,
    Noaa20,
}

impl Satellite {
    /// Accepts the FIRMS short codes and the long names.
    pub fn parse(token: &str) -> Option<Self> {
        match token.trim().to_ascii_uppercase().as_str() {
            "N" | "SUOMI-NPP" => Some(Satellite::SuomiNpp),
            "1" | "J1" | "NOAA-20" => Some(Satellite::Noaa20),
            _ => None,
        }
    }

    /// Short code used by the canonical CSV dialect.
    pub fn code(self) -> &'static str {
        match self {
            Satellite::SuomiNpp => "N",
            Satellite::Noaa20 => "1",
        }
    }
}

impl fmt::Display for Satellite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Satellite::SuomiNpp => write!(f, "SuomiNPP"),
            Satellite::Noaa20 => write!(f, "NOAA20"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DayNight {
    Day,
    Night,
}

impl DayNight {
    pub fn parse(token: &str) -> Option<Self> {
        match token.trim().to_ascii_uppercase().as_str() {
            "D" => Some(DayNight::Day),
            "N" => Some(DayNight::Night),
            _ => None,
        }
    }

    pub fn code(self) -> &'static str {
        match self {
            DayNight::Day => "D",
            DayNight::Night => "N",
        }
    }
}

/// One VIIRS active-fire detection.
///
/// Invariants (enforced at parse time): latitude in [-90, 90], longitude in
/// [-180, 180], both brightness temperatures positive Kelvin, `acq_time` a
/// valid HHMM value.
#[derive(Debug, Clone, PartialEq)]
pub struct HotspotRecord {
    pub latitude: f64,
    pub longitude: f64,
    /// I-4 channel brightness temperature, Kelvin.
    pub brightness: f64,
    /// Secondary channel brightness temperature, Kelvin.
    pub bright_t31: f64,
    pub confidence: Confidence,
    pub acq_date: NaiveDate,
    /// Acquisition time as an HHMM value (e.g. 1342 = 13:42 UTC).
    pub acq_time: u16,
    pub satellite: Satellite,
    /// Fire radiative power, megawatts.
    pub frp: Option<f64>,
    pub daynight: Option<DayNight>,
}

impl HotspotRecord {
    pub fn minutes_of_day(&self) -> u16 {
        (self.acq_time / 100) * 60 + self.acq_time % 100
    }
}

/// Optional geographic restriction for filtering, axis-aligned in lon/lat.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub min_lon: f64,
    pub min_lat: f64,
    pub max_lon: f64,
    pub max_lat: f64,
}

impl Region {
    pub fn contains(&self, lon: f64, lat: f64) -> bool {
        lon >= self.min_lon && lon <= self.max_lon && lat >= self.min_lat && lat <= self.max_lat
    }

    pub fn is_valid(&self) -> bool {
        self.min_lon < self.max_lon && self.min_lat < self.max_lat
    }
}

/// The filter constraints. Thresholds are inclusive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterCriteria {
    pub min_brightness: f64,
    pub min_bright_t31: f64,
    pub accepted_confidence: BTreeSet<Confidence>,
    pub region: Option<Region>,
}

impl Default for FilterCriteria {
    fn default() -> Self {
        FilterCriteria {
            min_brightness: 300.0,
            min_bright_t31: 270.0,
            accepted_confidence: [Confidence::Nominal, Confidence::High].into_iter().collect(),
            region: None,
        }
    }
}

/// Constraint names used as keys of `rows_failed_each_constraint`.
pub const CONSTRAINT_BRIGHTNESS: &str = "brightness";
pub const CONSTRAINT_BRIGHT_T31: &str = "bright_t31";
pub const CONSTRAINT_CONFIDENCE: &str = "confidence";
pub const CONSTRAINT_REGION: &str = "region";

/// True iff the record satisfies every constraint. Pure predicate; all
/// threshold comparisons are inclusive (`>=`).
pub fn apply_filter(record: &HotspotRecord, criteria: &FilterCriteria) -> bool {
    failed_constraints(record, criteria).is_empty()
}

/// Names of every constraint the record fails, in canonical order.
pub fn failed_constraints(record: &HotspotRecord, criteria: &FilterCriteria) -> Vec<&'static str> {
    let mut failed = Vec::new();
    if record.brightness < criteria.min_brightness {
        failed.push(CONSTRAINT_BRIGHTNESS);
    }
    if record.bright_t31 < criteria.min_bright_t31 {
        failed.push(CONSTRAINT_BRIGHT_T31);
    }
    if !criteria.accepted_confidence.contains(&record.confidence) {
        failed.push(CONSTRAINT_CONFIDENCE);
    }
    if let Some(region) = &criteria.region {
        if !region.contains(record.longitude, record.latitude) {
            failed.push(CONSTRAINT_REGION);
        }
    }
    failed
}

/// Parse/filter bookkeeping. `rows_read = rows_parsed + rows_rejected_parse`
/// always holds; a row that fails several constraints increments each of the
/// failed constraint counters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterStats {
    pub rows_read: u64,
    pub rows_parsed: u64,
    pub rows_rejected_parse: u64,
    pub rows_passed: u64,
    pub rows_failed_each_constraint: BTreeMap<String, u64>,
    pub per_satellite: BTreeMap<Satellite, u64>,
}

impl FilterStats {
    /// Merge another stats block into this one. Associative and commutative,
    /// so partial stats from concurrent workers can combine in any order.
    pub fn merge(&mut self, other: &FilterStats) {
        self.rows_read += other.rows_read;
        self.rows_parsed += other.rows_parsed;
        self.rows_rejected_parse += other.rows_rejected_parse;
        self.rows_passed += other.rows_passed;
        for (name, count) in &other.rows_failed_each_constraint {
            *self.rows_failed_each_constraint.entry(name.clone()).or_insert(0) += count;
        }
        for (sat, count) in &other.per_satellite {
            *self.per_satellite.entry(*sat).or_insert(0) += count;
        }
    }
}

/// Resolved column indices for one header, covering both dialects.
#[derive(Debug, Clone)]
struct ColumnMap {
    latitude: usize,
    longitude: usize,
    brightness: usize,
    bright_t31: usize,
    confidence: usize,
    acq_date: usize,
    acq_time: usize,
    satellite: usize,
    frp: Option<usize>,
    daynight: Option<usize>,
}

impl ColumnMap {
    fn from_header(header: &csv::StringRecord) -> Result<Self, IngestError> {
        let find = |names: &[&str]| -> Option<usize> {
            header
                .iter()
                .position(|h| names.iter().any(|n| h.trim().eq_ignore_ascii_case(n)))
        };
        let mut missing = Vec::new();
        let mut require = |names: &[&str]| -> usize {
            match find(names) {
                Some(i) => i,
                None => {
                    missing.push(names[0].to_string());
                    usize::MAX
                }
            }
        };
        let map = ColumnMap {
            latitude: require(&["latitude"]),
            longitude: require(&["longitude"]),
            brightness: require(&["brightness", "bright_ti4"]),
            bright_t31: require(&["bright_t31", "bright_ti5"]),
            confidence: require(&["confidence"]),
            acq_date: require(&["acq_date"]),
            acq_time: require(&["acq_time"]),
            satellite: require(&["satellite"]),
            frp: find(&["frp"]),
            daynight: find(&["daynight"]),
        };
        if missing.is_empty() {
            Ok(map)
        } else {
            Err(IngestError::Schema { missing })
        }
    }

    fn parse_row(&self, row: &csv::StringRecord) -> Option<HotspotRecord> {
        let field = |i: usize| row.get(i).map(str::trim);
        let latitude: f64 = field(self.latitude)?.parse().ok()?;
        let longitude: f64 = field(self.longitude)?.parse().ok()?;
        let brightness: f64 = field(self.brightness)?.parse().ok()?;
        let bright_t31: f64 = field(self.bright_t31)?.parse().ok()?;
        if !(-90.0..=90.0).contains(&latitude) || !(-180.0..=180.0).contains(&longitude) {
            return None;
        }
        if !(brightness > 0.0) || !(bright_t31 > 0.0) {
            return None;
        }
        let confidence = Confidence::parse(field(self.confidence)?)?;
        let acq_date = NaiveDate::parse_from_str(field(self.acq_date)?, "%Y-%m-%d").ok()?;
        let acq_time: u16 = field(self.acq_time)?.parse().ok()?;
        if acq_time / 100 >= 24 || acq_time % 100 >= 60 {
            return None;
        }
        let satellite = Satellite::parse(field(self.satellite)?)?;
        let frp = match self.frp.and_then(field) {
            None | Some("") => None,
            Some(tok) => Some(tok.parse::<f64>().ok().filter(|v| v.is_finite())?),
        };
        let daynight = match self.daynight.and_then(field) {
            None | Some("") => None,
            Some(tok) => Some(DayNight::parse(tok)?),
        };
        Some(HotspotRecord {
            latitude,
            longitude,
            brightness,
            bright_t31,
            confidence,
            acq_date,
            acq_time,
            satellite,
            frp,
            daynight,
        })
    }
}

/// Streaming record reader over one CSV source. Iteration yields parsed
/// records in file order; malformed rows are counted in the stats and
/// skipped. Constant memory in row count (one reused row buffer).
pub struct HotspotStream<R: Read> {
    reader: csv::Reader<R>,
    columns: ColumnMap,
    row: csv::StringRecord,
    stats: FilterStats,
}

impl<R: Read> HotspotStream<R> {
    /// Reads and validates the header row. A missing or unrecognizable
    /// header is fatal.
    pub fn new(source: R) -> Result<Self, IngestError> {
        let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(source);
        let header = reader.headers()?.clone();
        let columns = ColumnMap::from_header(&header)?;
        Ok(HotspotStream {
            reader,
            columns,
            row: csv::StringRecord::new(),
            stats: FilterStats::default(),
        })
    }

    /// Parse-side stats accumulated so far (`rows_read`, `rows_parsed`,
    /// `rows_rejected_parse`).
    pub fn stats(&self) -> &FilterStats {
        &self.stats
    }

    pub fn into_stats(self) -> FilterStats {
        self.stats
    }
}

impl<R: Read> Iterator for HotspotStream<R> {
    type Item = HotspotRecord;

    fn next(&mut self) -> Option<HotspotRecord> {
        loop {
            match self.reader.read_record(&mut self.row) {
                Ok(true) => {
                    self.stats.rows_read += 1;
                    match self.columns.parse_row(&self.row) {
                        Some(record) => {
                            self.stats.rows_parsed += 1;
                            return Some(record);
                        }
                        None => self.stats.rows_rejected_parse += 1,
                    }
                }
                Ok(false) => return None,
                // Row-level csv errors (bad UTF-8 etc.) reject the row; the
                // stream continues.
                Err(_) => {
                    self.stats.rows_read += 1;
                    self.stats.rows_rejected_parse += 1;
                }
            }
        }
    }
}

/// Open a stream over a CSV file.
pub fn parse_file(path: &Path) -> Result<HotspotStream<BufReader<File>>, IngestError> {
    let file = File::open(path).map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    HotspotStream::new(BufReader::new(file))
}

/// Stream a CSV source through the filter, handing each passing record to
/// `sink`. Returns fully populated stats. Memory use is constant in row
/// count as long as the sink does not accumulate.
pub fn filter_stream_with<R: Read>(
    source: R,
    criteria: &FilterCriteria,
    mut sink: impl FnMut(HotspotRecord),
) -> Result<FilterStats, IngestError> {
    let mut stream = HotspotStream::new(source)?;
    while let Some(record) = stream.next() {
        let failed = failed_constraints(&record, criteria);
        if failed.is_empty() {
            stream.stats.rows_passed += 1;
            *stream.stats.per_satellite.entry(record.satellite).or_insert(0) += 1;
            sink(record);
        } else {
            for name in failed {
                *stream
                    .stats
                    .rows_failed_each_constraint
                    .entry(name.to_string())
                    .or_insert(0) += 1;
            }
        }
    }
    Ok(stream.into_stats())
}

/// Like [`filter_stream_with`], reading from a file path.
pub fn filter_file_with(
    path: &Path,
    criteria: &FilterCriteria,
    sink: impl FnMut(HotspotRecord),
) -> Result<FilterStats, IngestError> {
    let file = File::open(path).map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    filter_stream_with(BufReader::new(file), criteria, sink)
}

/// Filter a file, collecting the passing records.
pub fn filter_file(
    path: &Path,
    criteria: &FilterCriteria,
) -> Result<(Vec<HotspotRecord>, FilterStats), IngestError> {
    let mut records = Vec::new();
    let stats = filter_file_with(path, criteria, |r| records.push(r))?;
    Ok((records, stats))
}

/// Concatenate per-satellite runs in run order. Each run must be internally
/// consistent: a record tagged with a different satellite than its run is a
/// fatal consistency error.
pub fn merge_satellite_runs(
    runs: Vec<(Satellite, Vec<HotspotRecord>)>,
) -> Result<Vec<HotspotRecord>, IngestError> {
    let mut merged = Vec::with_capacity(runs.iter().map(|(_, r)| r.len()).sum());
    for (satellite, records) in runs {
        for record in records {
            if record.satellite != satellite {
                return Err(IngestError::SatelliteMismatch {
                    expected: satellite,
                    found: record.satellite,
                });
            }
            merged.push(record);
        }
    }
    Ok(merged)
}

/// Incremental writer for the canonical CSV dialect.
pub struct CsvSink<W: Write> {
    writer: csv::Writer<W>,
}

impl<W: Write> CsvSink<W> {
    /// Writes the canonical header immediately.
    pub fn new(inner: W) -> Result<Self, IngestError> {
        let mut writer = csv::Writer::from_writer(inner);
        writer.write_record(CANONICAL_HEADER)?;
        Ok(CsvSink { writer })
    }

    pub fn write(&mut self, record: &HotspotRecord) -> Result<(), IngestError> {
        self.writer.write_record([
            record.latitude.to_string().as_str(),
            record.longitude.to_string().as_str(),
            record.brightness.to_string().as_str(),
            record.bright_t31.to_string().as_str(),
            record.confidence.code(),
            record.acq_date.format("%Y-%m-%d").to_string().as_str(),
            format!("{:04}", record.acq_time).as_str(),
            record.satellite.code(),
            record.frp.map(|v| v.to_string()).unwrap_or_default().as_str(),
            record.daynight.map(|d| d.code().to_string()).unwrap_or_default().as_str(),
        ])?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<(), IngestError> {
        self.writer.flush().map_err(IngestError::Write)
    }
}

/// Serialize records in the canonical dialect.
pub fn write_records_csv<'a, W: Write>(
    inner: W,
    records: impl IntoIterator<Item = &'a HotspotRecord>,
) -> Result<(), IngestError> {
    let mut sink = CsvSink::new(inner)?;
    for record in records {
        sink.write(record)?;
    }
    sink.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(brightness: f64, bright_t31: f64, confidence: Confidence) -> HotspotRecord {
        HotspotRecord {
            latitude: 25.1,
            longitude: 55.2,
            brightness,
            bright_t31,
            confidence,
            acq_date: NaiveDate::from_ymd_opt(2021, 6, 1).unwrap(),
            acq_time: 1342,
            satellite: Satellite::SuomiNpp,
            frp: None,
            daynight: None,
        }
    }

    #[test]
    fn parses_paper_dialect_header() {
        let csv = "latitude,longitude,brightness,bright_t31,confidence,acq_date,acq_time,satellite\n\
                   25.1,55.2,305.0,275.0,h,2021-06-01,1342,N\n";
        let mut stream = HotspotStream::new(csv.as_bytes()).unwrap();
        let rec = stream.next().unwrap();
        assert_eq!(rec.latitude, 25.1);
        assert_eq!(rec.longitude, 55.2);
        assert_eq!(rec.brightness, 305.0);
        assert_eq!(rec.bright_t31, 275.0);
        assert_eq!(rec.confidence, Confidence::High);
        assert!(stream.next().is_none());
    }

    #[test]
    fn viirs_dialect_yields_identical_record() {
        let a = "latitude,longitude,brightness,bright_t31,confidence,acq_date,acq_time,satellite\n\
                 25.1,55.2,305.0,275.0,h,2021-06-01,1342,N\n";
        let b = "latitude,longitude,bright_ti4,bright_ti5,confidence,acq_date,acq_time,satellite\n\
                 25.1,55.2,305.0,275.0,h,2021-06-01,1342,N\n";
        let ra: Vec<_> = HotspotStream::new(a.as_bytes()).unwrap().collect();
        let rb: Vec<_> = HotspotStream::new(b.as_bytes()).unwrap().collect();
        assert_eq!(ra, rb);
    }

    #[test]
    fn empty_longitude_rejects_row_and_continues() {
        let csv = "latitude,longitude,brightness,bright_t31,confidence,acq_date,acq_time,satellite\n\
                   25.1,,305.0,275.0,h,2021-06-01,1342,N\n\
                   26.0,55.0,310.0,280.0,n,2021-06-02,0101,1\n";
        let mut stream = HotspotStream::new(csv.as_bytes()).unwrap();
        let records: Vec<_> = (&mut stream).collect();
        assert_eq!(records.len(), 1);
        assert_eq!(records[0].satellite, Satellite::Noaa20);
        assert_eq!(stream.stats().rows_rejected_parse, 1);
        assert_eq!(stream.stats().rows_read, 2);
    }

    #[test]
    fn missing_header_is_fatal() {
        let csv = "a,b,c\n1,2,3\n";
        match HotspotStream::new(csv.as_bytes()) {
            Err(IngestError::Schema { missing }) => assert!(missing.contains(&"latitude".to_string())),
            Err(other) => panic!("expected schema error, got {other:?}"),
            Ok(_) => panic!("expected schema error, got a stream"),
        }
    }

    #[test]
    fn filter_threshold_boundaries_are_inclusive() {
        let criteria = FilterCriteria::default();
        assert!(apply_filter(&record(305.2, 276.1, Confidence::High), &criteria));
        assert!(apply_filter(&record(300.0, 270.0, Confidence::Nominal), &criteria));
        assert!(!apply_filter(&record(299.99, 280.0, Confidence::High), &criteria));
        assert!(!apply_filter(&record(310.0, 275.0, Confidence::Low), &criteria));
    }

    #[test]
    fn confidence_case_insensitive_and_strict() {
        assert_eq!(Confidence::parse("H"), Some(Confidence::High));
        assert_eq!(Confidence::parse(" n "), Some(Confidence::Nominal));
        assert_eq!(Confidence::parse("high"), None);
        assert_eq!(Confidence::parse("x"), None);
    }

    #[test]
    fn region_filter_applies_when_present() {
        let mut criteria = FilterCriteria::default();
        criteria.region = Some(Region {
            min_lon: 50.0,
            min_lat: 20.0,
            max_lon: 60.0,
            max_lat: 30.0,
        });
        assert!(apply_filter(&record(305.0, 275.0, Confidence::High), &criteria));
        let mut outside = record(305.0, 275.0, Confidence::High);
        outside.longitude = 10.0;
        assert!(!apply_filter(&outside, &criteria));
    }

    #[test]
    fn filter_stream_counts_constraint_failures() {
        let csv = "latitude,longitude,brightness,bright_t31,confidence,acq_date,acq_time,satellite\n\
                   25.0,55.0,310.0,280.0,l,2021-06-01,1000,N\n\
                   25.1,55.1,310.0,280.0,l,2021-06-01,1001,N\n\
                   25.2,55.2,310.0,280.0,l,2021-06-01,1002,N\n";
        let stats = filter_stream_with(csv.as_bytes(), &FilterCriteria::default(), |_| {}).unwrap();
        assert_eq!(stats.rows_passed, 0);
        assert_eq!(stats.rows_failed_each_constraint.get(CONSTRAINT_CONFIDENCE), Some(&3));
        assert_eq!(stats.rows_read, 3);
    }

    #[test]
    fn header_only_file_reads_zero_rows() {
        let csv = "latitude,longitude,brightness,bright_t31,confidence,acq_date,acq_time,satellite\n";
        let stats = filter_stream_with(csv.as_bytes(), &FilterCriteria::default(), |_| {}).unwrap();
        assert_eq!(stats.rows_read, 0);
        assert_eq!(stats.rows_passed, 0);
    }

    #[test]
    fn merge_runs_concatenates_and_checks_tags() {
        let s = |sat| {
            let mut r = record(310.0, 280.0, Confidence::High);
            r.satellite = sat;
            r
        };
        let merged = merge_satellite_runs(vec![
            (Satellite::SuomiNpp, vec![s(Satellite::SuomiNpp), s(Satellite::SuomiNpp)]),
            (Satellite::Noaa20, vec![s(Satellite::Noaa20), s(Satellite::Noaa20), s(Satellite::Noaa20)]),
        ])
        .unwrap();
        assert_eq!(merged.len(), 5);

        let err = merge_satellite_runs(vec![(
            Satellite::Noaa20,
            vec![s(Satellite::SuomiNpp)],
        )]);
        assert!(matches!(err, Err(IngestError::SatelliteMismatch { .. })));

        let single = merge_satellite_runs(vec![(Satellite::SuomiNpp, vec![s(Satellite::SuomiNpp)])]).unwrap();
        assert_eq!(single.len(), 1);
    }

    #[test]
    fn canonical_round_trip_preserves_records() {
        let mut rec = record(305.5, 275.25, Confidence::Nominal);
        rec.frp = Some(12.75);
        rec.daynight = Some(DayNight::Night);
        let mut buf = Vec::new();
        write_records_csv(&mut buf, [&rec]).unwrap();
        let parsed: Vec<_> = HotspotStream::new(buf.as_slice()).unwrap().collect();
        assert_eq!(parsed, vec![rec]);
    }

    #[test]
    fn stats_merge_is_additive() {
        let csv_a = "latitude,longitude,brightness,bright_t31,confidence,acq_date,acq_time,satellite\n\
                     25.0,55.0,310.0,280.0,h,2021-06-01,1000,N\n";
        let csv_b = "latitude,longitude,brightness,bright_t31,confidence,acq_date,acq_time,satellite\n\
                     25.0,55.0,310.0,280.0,h,2021-06-01,1000,1\n\
                     25.0,55.0,200.0,280.0,h,2021-06-01,1001,1\n";
        let mut a = filter_stream_with(csv_a.as_bytes(), &FilterCriteria::default(), |_| {}).unwrap();
        let b = filter_stream_with(csv_b.as_bytes(), &FilterCriteria::default(), |_| {}).unwrap();
        a.merge(&b);
        assert_eq!(a.rows_read, 3);
        assert_eq!(a.rows_passed, 2);
        assert_eq!(a.per_satellite.get(&Satellite::SuomiNpp), Some(&1));
        assert_eq!(a.per_satellite.get(&Satellite::Noaa20), Some(&1));
        assert_eq!(a.rows_failed_each_constraint.get(CONSTRAINT_BRIGHTNESS), Some(&1));
    }
}
