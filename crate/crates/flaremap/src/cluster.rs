//! Single-linkage spatial clustering of filtered detections into sites.
//!
//! Two detections are linked when their great-circle separation is at most
//! the linkage radius (default 750 m); sites are the connected components of
//! that relation. Exact duplicate detections (identical position, date,
//! time, and satellite) collapse to one member before linkage.
//!
//! The output is deterministic and independent of input order: members are
//! canonically sorted within each site before any aggregate is computed, and
//! site ids are assigned by ascending (centroid latitude, centroid longitude).

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::HotspotRecord;

/// Mean Earth radius in meters, used for great-circle distances.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// Default single-linkage radius in meters.
pub const DEFAULT_LINK_RADIUS_M: f64 = 750.0;

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("linkage radius must be positive and finite, got {0}")]
    BadRadius(f64),
    #[error("failed to write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("serialization error: {0}")]
    Serialize(#[from] serde_json::Error),
}

/// Linkage parameters. The default radius is two sensor pixels; detections
/// that close are indistinguishable as separate facilities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterParams {
    pub radius_m: f64,
    /// Sites with fewer detections are dropped by [`rank_sites`].
    pub min_detections: u64,
}

impl Default for ClusterParams {
    fn default() -> Self {
        ClusterParams {
            radius_m: DEFAULT_LINK_RADIUS_M,
            min_detections: 1,
        }
    }
}

impl ClusterParams {
    pub fn with_radius(radius_m: f64) -> Self {
        ClusterParams {
            radius_m,
            ..ClusterParams::default()
        }
    }
}

/// Great-circle distance in meters between two (lat, lon) points, degrees.
pub fn haversine_distance(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let phi1 = lat1.to_radians();
    let phi2 = lat2.to_radians();
    let dphi = (lat2 - lat1).to_radians();
    let dlambda = (lon2 - lon1).to_radians();
    let a = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * a.sqrt().min(1.0).asin()
}

/// One clustered site: canonical member list plus aggregates.
#[derive(Debug, Clone, PartialEq)]
pub struct Site {
    /// Dense id, assigned by ascending (lat, lon) of the centroid.
    pub site_id: u64,
    /// Arithmetic mean of member latitudes.
    pub lat: f64,
    /// Arithmetic mean of member longitudes.
    pub lon: f64,
    /// Distinct member detections after duplicate collapse.
    pub members: Vec<HotspotRecord>,
    pub first_seen: NaiveDate,
    pub last_seen: NaiveDate,
    /// [min_lon, min_lat, max_lon, max_lat] over members.
    pub bbox: [f64; 4],
}

impl Site {
    pub fn count(&self) -> usize {
        self.members.len()
    }
}

/// Catalog row: the JSON Lines projection of a [`Site`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteRow {
    pub site_id: u64,
    pub lat: f64,
    pub lon: f64,
    pub count: u64,
    pub first_seen: NaiveDate,
    pub last_seen: NaiveDate,
    pub bbox: [f64; 4],
}

impl From<&Site> for SiteRow {
    fn from(site: &Site) -> Self {
        SiteRow {
            site_id: site.site_id,
            lat: site.lat,
            lon: site.lon,
            count: site.members.len() as u64,
            first_seen: site.first_seen,
            last_seen: site.last_seen,
            bbox: site.bbox,
        }
    }
}

/// Union-find over dense indices with path halving and union by size.
#[derive(Debug, Clone)]
pub struct DisjointSet {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl DisjointSet {
    pub fn new(n: usize) -> Self {
        DisjointSet {
            parent: (0..n).collect(),
            size: vec![1; n],
        }
    }

    pub fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    pub fn union(&mut self, a: usize, b: usize) {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        if self.size[ra] < self.size[rb] {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb] = ra;
        self.size[ra] += self.size[rb];
    }
}

/// Duplicate-collapse key: bitwise position plus acquisition identity.
fn dedup_key(r: &HotspotRecord) -> (u64, u64, NaiveDate, u16, crate::ingest::Satellite) {
    (
        r.latitude.to_bits(),
        r.longitude.to_bits(),
        r.acq_date,
        r.acq_time,
        r.satellite,
    )
}

/// Canonical member order inside a site: by (lat, lon, date, time, satellite)
/// bit patterns, total and input-order independent.
fn member_order(a: &HotspotRecord, b: &HotspotRecord) -> std::cmp::Ordering {
    dedup_key(a).cmp(&dedup_key(b))
}

/// Unit-sphere chordal coordinates scaled by the Earth radius. Chord length
/// is monotone in great-circle distance, so a great-circle threshold `d`
/// maps to the chord threshold `2 R sin(d / 2R)`.
fn to_chord_xyz(lat: f64, lon: f64) -> [f64; 3] {
    let phi = lat.to_radians();
    let lambda = lon.to_radians();
    [
        EARTH_RADIUS_M * phi.cos() * lambda.cos(),
        EARTH_RADIUS_M * phi.cos() * lambda.sin(),
        EARTH_RADIUS_M * phi.sin(),
    ]
}

/// Collapse exact duplicates, preserving first occurrence order.
fn collapse_duplicates(records: Vec<HotspotRecord>) -> Vec<HotspotRecord> {
    let mut seen = std::collections::HashSet::with_capacity(records.len());
    let mut distinct = Vec::with_capacity(records.len());
    for record in records {
        if seen.insert(dedup_key(&record)) {
            distinct.push(record);
        }
    }
    distinct
}

fn component_lists(records: &[HotspotRecord], dsu: &mut DisjointSet) -> Vec<Vec<usize>> {
    let mut by_root: HashMap<usize, Vec<usize>> = HashMap::new();
    for i in 0..records.len() {
        by_root.entry(dsu.find(i)).or_default().push(i);
    }
    by_root.into_values().collect()
}

/// Assemble sorted sites from component index lists.
fn build_sites(records: Vec<HotspotRecord>, components: Vec<Vec<usize>>) -> Vec<Site> {
    let mut sites: Vec<Site> = components
        .into_iter()
        .map(|indices| {
            let mut members: Vec<HotspotRecord> =
                indices.into_iter().map(|i| records[i].clone()).collect();
            // Canonical order first: the centroid is then a sum over a fixed
            // sequence, so equal member sets give bitwise-equal centroids
            // regardless of input permutation.
            members.sort_by(member_order);
            let n = members.len() as f64;
            let lat = members.iter().map(|m| m.latitude).sum::<f64>() / n;
            let lon = members.iter().map(|m| m.longitude).sum::<f64>() / n;
            let first_seen = members.iter().map(|m| m.acq_date).min().unwrap();
            let last_seen = members.iter().map(|m| m.acq_date).max().unwrap();
            let bbox = [
                members.iter().map(|m| m.longitude).fold(f64::INFINITY, f64::min),
                members.iter().map(|m| m.latitude).fold(f64::INFINITY, f64::min),
                members.iter().map(|m| m.longitude).fold(f64::NEG_INFINITY, f64::max),
                members.iter().map(|m| m.latitude).fold(f64::NEG_INFINITY, f64::max),
            ];
            Site {
                site_id: 0,
                lat,
                lon,
                members,
                first_seen,
                last_seen,
                bbox,
            }
        })
        .collect();
    sites.sort_by(|a, b| {
        (a.lat, a.lon)
            .partial_cmp(&(b.lat, b.lon))
            .expect("centroids are finite")
    });
    for (id, site) in sites.iter_mut().enumerate() {
        site.site_id = id as u64;
    }
    sites
}

/// Cluster detections into sites with a uniform-grid accelerator.
///
/// Points are bucketed in 3D chordal space with cell edge equal to the chord
/// threshold; any pair within the threshold lies in the same or an adjacent
/// cell, so scanning the 27-cell neighborhood finds every link. Expected
/// O(n) pair tests for geographically dispersed data, worst case O(n²) when
/// everything shares one cell.
pub fn cluster_hotspots(records: Vec<HotspotRecord>, params: &ClusterParams) -> Result<Vec<Site>, ClusterError> {
    let radius_m = params.radius_m;
    if !(radius_m > 0.0) || !radius_m.is_finite() {
        return Err(ClusterError::BadRadius(radius_m));
    }
    let records = collapse_duplicates(records);
    if records.is_empty() {
        return Ok(Vec::new());
    }

    let chord_threshold = 2.0 * EARTH_RADIUS_M * (radius_m / (2.0 * EARTH_RADIUS_M)).sin();
    let chord_sq = chord_threshold * chord_threshold;
    let cell = chord_threshold;

    let xyz: Vec<[f64; 3]> = records
        .iter()
        .map(|r| to_chord_xyz(r.latitude, r.longitude))
        .collect();

    let key_of = |p: &[f64; 3]| -> (i64, i64, i64) {
        (
            (p[0] / cell).floor() as i64,
            (p[1] / cell).floor() as i64,
            (p[2] / cell).floor() as i64,
        )
    };

    let mut grid: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::with_capacity(records.len());
    for (i, p) in xyz.iter().enumerate() {
        grid.entry(key_of(p)).or_default().push(i);
    }

    let mut dsu = DisjointSet::new(records.len());
    for (i, p) in xyz.iter().enumerate() {
        let (cx, cy, cz) = key_of(p);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let Some(bucket) = grid.get(&(cx + dx, cy + dy, cz + dz)) else {
                        continue;
                    };
                    for &j in bucket {
                        if j <= i {
                            continue;
                        }
                        let q = &xyz[j];
                        let d2 = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
                        if d2 <= chord_sq {
                            dsu.union(i, j);
                        }
                    }
                }
            }
        }
    }

    let components = component_lists(&records, &mut dsu);
    Ok(build_sites(records, components))
}

/// Reference implementation: all-pairs haversine linkage. Quadratic; used to
/// cross-check the grid-accelerated path.
pub fn cluster_hotspots_exhaustive(
    records: Vec<HotspotRecord>,
    params: &ClusterParams,
) -> Result<Vec<Site>, ClusterError> {
    let radius_m = params.radius_m;
    if !(radius_m > 0.0) || !radius_m.is_finite() {
        return Err(ClusterError::BadRadius(radius_m));
    }
    let records = collapse_duplicates(records);
    let mut dsu = DisjointSet::new(records.len());
    for i in 0..records.len() {
        for j in (i + 1)..records.len() {
            let d = haversine_distance(
                records[i].latitude,
                records[i].longitude,
                records[j].latitude,
                records[j].longitude,
            );
            if d <= radius_m {
                dsu.union(i, j);
            }
        }
    }
    let components = component_lists(&records, &mut dsu);
    Ok(build_sites(records, components))
}

/// Drop sites with fewer than `min_detections` members and sort the rest by
/// descending detection count, ties broken by ascending (lat, lon). Ids are
/// kept as assigned by clustering.
pub fn rank_sites(sites: Vec<Site>, min_detections: u64) -> Vec<Site> {
    let mut kept: Vec<Site> = sites
        .into_iter()
        .filter(|s| s.count() as u64 >= min_detections)
        .collect();
    kept.sort_by(|a, b| {
        b.count()
            .cmp(&a.count())
            .then(a.lat.total_cmp(&b.lat))
            .then(a.lon.total_cmp(&b.lon))
    });
    kept
}

/// Write the site catalog as JSON Lines, one [`SiteRow`] per line, in
/// site_id order.
pub fn write_catalog<W: Write>(mut out: W, sites: &[Site]) -> Result<(), ClusterError> {
    for site in sites {
        let row = SiteRow::from(site);
        let line = serde_json::to_string(&row)?;
        writeln_io(&mut out, &line)?;
    }
    Ok(())
}

fn writeln_io<W: Write>(out: &mut W, line: &str) -> Result<(), ClusterError> {
    out.write_all(line.as_bytes())
        .and_then(|_| out.write_all(b"\n"))
        .map_err(|source| ClusterError::Io {
            path: PathBuf::from("<writer>"),
            source,
        })
}

/// Write the catalog to a file path.
pub fn write_catalog_file(path: &Path, sites: &[Site]) -> Result<(), ClusterError> {
    let file = std::fs::File::create(path).map_err(|source| ClusterError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = std::io::BufWriter::new(file);
    write_catalog(&mut out, sites)?;
    out.flush().map_err(|source| ClusterError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Read a catalog written by [`write_catalog`].
pub fn read_catalog<R: std::io::BufRead>(reader: R) -> Result<Vec<SiteRow>, ClusterError> {
    let mut rows = Vec::new();
    for line in reader.lines() {
        let line = line.map_err(|source| ClusterError::Io {
            path: PathBuf::from("<reader>"),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(&line)?);
    }
    Ok(rows)
}
