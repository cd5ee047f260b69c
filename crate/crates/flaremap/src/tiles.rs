//! Web Mercator slippy-map tile arithmetic.
//!
//! Tile addresses follow the standard XYZ scheme: at zoom `z` the world is a
//! 2^z by 2^z grid, x growing east from longitude -180, y growing south from
//! the projection's top latitude. Latitudes are clamped to the Mercator
//! limit before projection; longitudes are normalized into [-180, 180).

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// WGS84 equatorial radius in meters, the Web Mercator sphere radius.
pub const WEB_MERCATOR_RADIUS_M: f64 = 6_378_137.0;

/// Latitude bound of the square Web Mercator world, atan(sinh(pi)) degrees.
pub const MAX_MERCATOR_LAT: f64 = 85.05112878;

/// Maximum supported zoom. 2^30 tiles per axis keeps all arithmetic exact
/// in f64 and far exceeds any real tile service.
pub const MAX_ZOOM: u8 = 30;

#[derive(Debug, Error, PartialEq)]
pub enum TileError {
    #[error("zoom {0} exceeds maximum {MAX_ZOOM}")]
    ZoomTooLarge(u8),
    #[error("tile ({x}, {y}) out of range at zoom {z}")]
    TileOutOfRange { x: u64, y: u64, z: u8 },
    #[error("coordinate is not finite")]
    NotFinite,
}

/// A tile address (x, y, zoom).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TileId {
    pub x: u64,
    pub y: u64,
    pub z: u8,
}

/// Geographic bounding box of a tile, degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LonLatBounds {
    pub min_lon: f64,
    pub min_lat: f64,
    pub max_lon: f64,
    pub max_lat: f64,
}

/// Normalize a longitude into [-180, 180). In-range values pass through
/// bit-exactly; only out-of-range values pay the wrap arithmetic.
pub fn normalize_lon(lon: f64) -> f64 {
    if (-180.0..180.0).contains(&lon) {
        return lon;
    }
    let wrapped = (lon + 180.0).rem_euclid(360.0) - 180.0;
    // rem_euclid can land exactly on 360.0 due to rounding; fold that back.
    if wrapped >= 180.0 {
        wrapped - 360.0
    } else {
        wrapped
    }
}

/// Clamp a latitude to the Web Mercator projection limits.
pub fn clamp_lat(lat: f64) -> f64 {
    lat.clamp(-MAX_MERCATOR_LAT, MAX_MERCATOR_LAT)
}

/// Tile containing the given point.
///
/// Fractional tile coordinates are floored, so a point exactly on a tile's
/// east or south edge belongs to the next tile; the far world edge
/// (lat = -max, where y would reach 2^z) is clamped back to the last row.
pub fn lonlat_to_tile(lon: f64, lat: f64, z: u8) -> Result<TileId, TileError> {
    if !lon.is_finite() || !lat.is_finite() {
        return Err(TileError::NotFinite);
    }
    if z > MAX_ZOOM {
        return Err(TileError::ZoomTooLarge(z));
    }
    let n = (1u64 << z) as f64;
    let lon = normalize_lon(lon);
    let lat = clamp_lat(lat);
    let xf = (lon + 180.0) / 360.0 * n;
    let phi = lat.to_radians();
    let yf = (1.0 - (phi.tan() + 1.0 / phi.cos()).ln() / std::f64::consts::PI) / 2.0 * n;
    let max_index = (1u64 << z) - 1;
    let x = (xf.floor() as i64).clamp(0, max_index as i64) as u64;
    let y = (yf.floor() as i64).clamp(0, max_index as i64) as u64;
    Ok(TileId { x, y, z })
}

/// Geographic bounds of a tile. North edge is `max_lat`, west edge `min_lon`.
pub fn tile_to_bounds(tile: TileId) -> Result<LonLatBounds, TileError> {
    if tile.z > MAX_ZOOM {
        return Err(TileError::ZoomTooLarge(tile.z));
    }
    let count = 1u64 << tile.z;
    if tile.x >= count || tile.y >= count {
        return Err(TileError::TileOutOfRange {
            x: tile.x,
            y: tile.y,
            z: tile.z,
        });
    }
    let n = count as f64;
    let lon_at = |x: f64| x / n * 360.0 - 180.0;
    let lat_at = |y: f64| {
        let t = std::f64::consts::PI * (1.0 - 2.0 * y / n);
        t.sinh().atan().to_degrees()
    };
    Ok(LonLatBounds {
        min_lon: lon_at(tile.x as f64),
        max_lon: lon_at((tile.x + 1) as f64),
        max_lat: lat_at(tile.y as f64),
        min_lat: lat_at((tile.y + 1) as f64),
    })
}

/// Center of a tile in lon/lat degrees.
pub fn tile_center(tile: TileId) -> Result<(f64, f64), TileError> {
    let b = tile_to_bounds(tile)?;
    let n = (1u64 << tile.z) as f64;
    let t = std::f64::consts::PI * (1.0 - 2.0 * (tile.y as f64 + 0.5) / n);
    Ok(((b.min_lon + b.max_lon) / 2.0, t.sinh().atan().to_degrees()))
}

/// Ground resolution of one pixel at the given latitude, meters per pixel.
///
/// `tile_px` is the tile edge in pixels (256 for classic tiles, 512 for
/// retina). Resolution shrinks with cos(lat): Mercator stretches the ground
/// towards the poles while pixels stay fixed.
pub fn meters_per_pixel(lat: f64, z: u8, tile_px: u32) -> Result<f64, TileError> {
    if !lat.is_finite() {
        return Err(TileError::NotFinite);
    }
    if z > MAX_ZOOM {
        return Err(TileError::ZoomTooLarge(z));
    }
    let lat = clamp_lat(lat);
    let world_px = (tile_px as f64) * (1u64 << z) as f64;
    Ok(2.0 * std::f64::consts::PI * WEB_MERCATOR_RADIUS_M * lat.to_radians().cos() / world_px)
}

/// Width of the ground footprint of a `width_px`-wide image centered at
/// `lat`, meters.
pub fn image_ground_width_m(lat: f64, z: u8, tile_px: u32, width_px: u32) -> Result<f64, TileError> {
    Ok(meters_per_pixel(lat, z, tile_px)? * width_px as f64)
}
