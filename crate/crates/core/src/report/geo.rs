use serde::{Deserialize, Serialize};

use super::GeoPoint;
use crate::contingency::AssetRef;
use crate::grid::GridSpec;

pub const DEFAULT_RADIUS_M: f64 = 500.0;

const METERS_PER_DEG_LAT: f64 = 110_574.0;
const METERS_PER_DEG_LON_EQUATOR: f64 = 111_320.0;

/// Ties closer than this (in meters) go to the lower branch id.
const TIE_TOLERANCE_M: f64 = 1e-6;

/// Affine placement of grid map coordinates on the globe.
///
/// Map point (0, 0) sits at (`origin_lat`, `origin_lon`); +x points east,
/// +y north, and one map unit is `meters_per_unit` meters. Geographic
/// offsets use an equirectangular projection about the origin, which is
/// accurate to well under a meter across a few tens of kilometers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoFrame {
    pub origin_lat: f64,
    pub origin_lon: f64,
    pub meters_per_unit: f64,
}

impl Default for GeoFrame {
    fn default() -> Self {
        GeoFrame {
            origin_lat: 40.5,
            origin_lon: -74.45,
            meters_per_unit: 1000.0,
        }
    }
}

impl GeoFrame {
    fn lon_scale(&self) -> f64 {
        METERS_PER_DEG_LON_EQUATOR * self.origin_lat.to_radians().cos()
    }

    /// Location in meters east and north of the origin.
    pub fn to_meters(&self, p: GeoPoint) -> (f64, f64) {
        (
            (p.lon - self.origin_lon) * self.lon_scale(),
            (p.lat - self.origin_lat) * METERS_PER_DEG_LAT,
        )
    }

    /// Geographic position of a map coordinate.
    pub fn to_geo(&self, x: f64, y: f64) -> GeoPoint {
        GeoPoint {
            lat: self.origin_lat + y * self.meters_per_unit / METERS_PER_DEG_LAT,
            lon: self.origin_lon + x * self.meters_per_unit / self.lon_scale(),
        }
    }
}

fn point_segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
}

/// Nearest branch to `location` within `radius_m`, ties to the lowest id.
pub fn map_to_asset(
    location: GeoPoint,
    spec: &GridSpec,
    radius_m: f64,
    frame: &GeoFrame,
) -> Option<AssetRef> {
    let p = frame.to_meters(location);
    let scale = frame.meters_per_unit;
    let mut branches: Vec<_> = spec.branches.iter().collect();
    branches.sort_by_key(|b| b.id);

    let mut best: Option<(f64, u32)> = None;
    for br in branches {
        let (Some(f), Some(t)) = (spec.bus(br.from_bus), spec.bus(br.to_bus)) else {
            continue;
        };
        let a = (f.coord.0 * scale, f.coord.1 * scale);
        let b = (t.coord.0 * scale, t.coord.1 * scale);
        let d = point_segment_distance(p, a, b);
        if best.is_none_or(|(bd, _)| d < bd - TIE_TOLERANCE_M) {
            best = Some((d, br.id));
        }
    }
    best.filter(|(d, _)| *d <= radius_m)
        .map(|(_, id)| AssetRef::branch(id))
}
