//! Planar points and the geographic projection used to obtain them.

use serde::{Deserialize, Serialize};

/// Mean Earth radius in meters, used by the equirectangular projection.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// A point in the local planar coordinate system, in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn distance(&self, other: Point) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        (dx * dx + dy * dy).sqrt()
    }
}

/// Maps WGS84 coordinates onto a local plane and back.
///
/// Study areas span tens of kilometers, so a local equirectangular
/// projection about the area center is accurate enough. `Identity`
/// passes pre-projected metric inputs through unchanged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Projection {
    Identity,
    Equirectangular { lon0: f64, lat0: f64 },
}

impl Projection {
    /// Projection centered on the middle of a geographic bounding box.
    pub fn centered_on(min_lon: f64, min_lat: f64, max_lon: f64, max_lat: f64) -> Self {
        Projection::Equirectangular {
            lon0: 0.5 * (min_lon + max_lon),
            lat0: 0.5 * (min_lat + max_lat),
        }
    }

    pub fn forward(&self, lon: f64, lat: f64) -> Point {
        match *self {
            Projection::Identity => Point::new(lon, lat),
            Projection::Equirectangular { lon0, lat0 } => {
                let k = std::f64::consts::PI / 180.0 * EARTH_RADIUS_M;
                Point::new(
                    (lon - lon0) * lat0.to_radians().cos() * k,
                    (lat - lat0) * k,
                )
            }
        }
    }

    pub fn inverse(&self, p: Point) -> (f64, f64) {
        match *self {
            Projection::Identity => (p.x, p.y),
            Projection::Equirectangular { lon0, lat0 } => {
                let k = std::f64::consts::PI / 180.0 * EARTH_RADIUS_M;
                (
                    lon0 + p.x / (lat0.to_radians().cos() * k),
                    lat0 + p.y / k,
                )
            }
        }
    }
}
