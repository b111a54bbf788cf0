//! Regular hexagonal tessellation of the study area.
//!
//! Cells are flat-top hexagons on a lattice anchored at the lower-left
//! corner of the bounding box. Point-in-cell lookup is nearest-centroid
//! (the hexagons are the Voronoi cells of their centroids), with ties
//! broken toward the lowest cell id.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Point, Projection};

/// Default hexagon side length in meters.
pub const DEFAULT_HEX_SIDE_M: f64 = 1000.0;

/// Dense cell identifier, unique within one [`Grid`].
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct CellId(pub u32);

impl fmt::Display for CellId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub id: CellId,
    pub centroid: Point,
    pub side: f64,
    pub opportunities: u64,
    /// Lattice column/row, kept for fast lookup.
    col: i32,
    row: i32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    cells: Vec<Cell>,
    bbox_min: Point,
    bbox_max: Point,
    side: f64,
    index: BTreeMap<(i32, i32), CellId>,
}

/// Column spacing of a flat-top hexagonal lattice, in side lengths.
const COL_STEP: f64 = 1.5;

fn row_step(side: f64) -> f64 {
    3.0_f64.sqrt() * side
}

fn lattice_centroid(origin: Point, side: f64, col: i32, row: i32) -> Point {
    let dy = row_step(side);
    let offset = if col.rem_euclid(2) == 1 { 0.5 * dy } else { 0.0 };
    Point::new(
        origin.x + COL_STEP * side * col as f64,
        origin.y + dy * row as f64 + offset,
    )
}

/// Partition the bounding box into flat-top hexagons of the given side.
///
/// The grid contains every lattice cell whose centroid lies within the
/// box expanded by one side length, which guarantees the hexagons cover
/// the box. Deterministic for fixed inputs.
pub fn tessellate(bbox_min: Point, bbox_max: Point, side: f64) -> Result<Grid> {
    if !(side > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "hexagon side must be positive, got {side}"
        )));
    }
    if bbox_max.x < bbox_min.x || bbox_max.y < bbox_min.y {
        return Err(Error::InvalidParameter(
            "bounding box max must not be below min".into(),
        ));
    }

    let origin = bbox_min;
    let dy = row_step(side);
    let col_lo = ((bbox_min.x - side - origin.x) / (COL_STEP * side)).ceil() as i32;
    let col_hi = ((bbox_max.x + side - origin.x) / (COL_STEP * side)).floor() as i32;

    let mut cells = Vec::new();
    let mut index = BTreeMap::new();
    for col in col_lo..=col_hi {
        let offset = if col.rem_euclid(2) == 1 { 0.5 * dy } else { 0.0 };
        let row_lo = ((bbox_min.y - side - origin.y - offset) / dy).ceil() as i32;
        let row_hi = ((bbox_max.y + side - origin.y - offset) / dy).floor() as i32;
        for row in row_lo..=row_hi {
            let id = CellId(cells.len() as u32);
            cells.push(Cell {
                id,
                centroid: lattice_centroid(origin, side, col, row),
                side,
                opportunities: 0,
                col,
                row,
            });
            index.insert((col, row), id);
        }
    }

    Ok(Grid {
        cells,
        bbox_min,
        bbox_max,
        side,
        index,
    })
}

impl Grid {
    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn side(&self) -> f64 {
        self.side
    }

    pub fn bbox(&self) -> (Point, Point) {
        (self.bbox_min, self.bbox_max)
    }

    pub fn cell(&self, id: CellId) -> &Cell {
        &self.cells[id.0 as usize]
    }

    pub fn centroid(&self, id: CellId) -> Point {
        self.cells[id.0 as usize].centroid
    }

    pub fn total_opportunities(&self) -> u64 {
        self.cells.iter().map(|c| c.opportunities).sum()
    }

    /// Id of the cell containing `p` (nearest centroid, lowest id on ties).
    ///
    /// Errors if `p` falls outside the bounding box expanded by one side
    /// length on every edge.
    pub fn locate(&self, p: Point) -> Result<CellId> {
        let s = self.side;
        if p.x < self.bbox_min.x - s
            || p.x > self.bbox_max.x + s
            || p.y < self.bbox_min.y - s
            || p.y > self.bbox_max.y + s
        {
            return Err(Error::OutOfBounds { x: p.x, y: p.y });
        }

        let dy = row_step(s);
        let col_guess = ((p.x - self.bbox_min.x) / (COL_STEP * s)).round() as i32;
        let mut best: Option<(f64, CellId)> = None;
        for col in col_guess - 3..=col_guess + 3 {
            let offset = if col.rem_euclid(2) == 1 { 0.5 * dy } else { 0.0 };
            let row_guess = ((p.y - self.bbox_min.y - offset) / dy).round() as i32;
            for row in row_guess - 3..=row_guess + 3 {
                if let Some(&id) = self.index.get(&(col, row)) {
                    let d2 = sq_dist(self.cells[id.0 as usize].centroid, p);
                    best = match best {
                        Some((bd2, bid)) if bd2 < d2 || (bd2 == d2 && bid < id) => {
                            Some((bd2, bid))
                        }
                        _ => Some((d2, id)),
                    };
                }
            }
        }
        best.map(|(_, id)| id).ok_or(Error::OutOfBounds { x: p.x, y: p.y })
    }

    /// Counts people points per cell. Out-of-bounds points are skipped and
    /// the number of skipped points is returned alongside the grid.
    pub fn assign_opportunities(mut self, people: &[Point]) -> (Grid, usize) {
        for cell in &mut self.cells {
            cell.opportunities = 0;
        }
        let mut out_of_bounds = 0usize;
        for p in people {
            match self.locate(*p) {
                Ok(id) => self.cells[id.0 as usize].opportunities += 1,
                Err(_) => out_of_bounds += 1,
            }
        }
        (self, out_of_bounds)
    }

    /// Vertices of a cell's flat-top hexagon, closed (first == last).
    pub fn hexagon_ring(&self, id: CellId) -> Vec<Point> {
        let c = self.centroid(id);
        let s = self.side;
        let mut ring: Vec<Point> = (0..6)
            .map(|k| {
                let ang = std::f64::consts::PI / 3.0 * k as f64;
                Point::new(c.x + s * ang.cos(), c.y + s * ang.sin())
            })
            .collect();
        ring.push(ring[0]);
        ring
    }
}

fn sq_dist(a: Point, b: Point) -> f64 {
    let dx = a.x - b.x;
    let dy = a.y - b.y;
    dx * dx + dy * dy
}

/// Serializes the grid as a GeoJSON FeatureCollection of hexagon polygons.
///
/// Polygon coordinates are expressed through the inverse of `proj` so the
/// file plots directly on a map; the planar centroid of every cell is kept
/// verbatim in the feature properties (`cx`, `cy`) so the grid can be
/// reloaded without losing a bit.
pub fn grid_to_geojson(grid: &Grid, proj: &Projection) -> serde_json::Value {
    let features: Vec<serde_json::Value> = grid
        .cells()
        .iter()
        .map(|cell| {
            let ring: Vec<[f64; 2]> = grid
                .hexagon_ring(cell.id)
                .into_iter()
                .map(|v| {
                    let (lon, lat) = proj.inverse(v);
                    [lon, lat]
                })
                .collect();
            serde_json::json!({
                "type": "Feature",
                "geometry": { "type": "Polygon", "coordinates": [ring] },
                "properties": {
                    "cell_id": cell.id.0,
                    "opportunities": cell.opportunities,
                    "cx": cell.centroid.x,
                    "cy": cell.centroid.y,
                    "col": cell.col,
                    "row": cell.row,
                },
            })
        })
        .collect();
    serde_json::json!({
        "type": "FeatureCollection",
        "features": features,
        "side": grid.side,
        "bbox_planar": [grid.bbox_min.x, grid.bbox_min.y, grid.bbox_max.x, grid.bbox_max.y],
        "projection": proj,
    })
}

/// Rebuilds a grid (and its projection) from [`grid_to_geojson`] output.
pub fn grid_from_geojson(value: &serde_json::Value) -> Result<(Grid, Projection)> {
    let invalid = |msg: &str| Error::InvalidParameter(format!("grid geojson: {msg}"));
    let side = value["side"].as_f64().ok_or_else(|| invalid("missing side"))?;
    let bbox = value["bbox_planar"]
        .as_array()
        .ok_or_else(|| invalid("missing bbox_planar"))?;
    if bbox.len() != 4 {
        return Err(invalid("bbox_planar must have 4 entries"));
    }
    let b: Vec<f64> = bbox.iter().filter_map(|v| v.as_f64()).collect();
    let proj: Projection = serde_json::from_value(value["projection"].clone())
        .map_err(|e| invalid(&format!("bad projection: {e}")))?;

    let features = value["features"]
        .as_array()
        .ok_or_else(|| invalid("missing features"))?;
    let mut cells = Vec::with_capacity(features.len());
    let mut index = BTreeMap::new();
    for f in features {
        let p = &f["properties"];
        let id = CellId(
            p["cell_id"]
                .as_u64()
                .ok_or_else(|| invalid("feature missing cell_id"))? as u32,
        );
        let cell = Cell {
            id,
            centroid: Point::new(
                p["cx"].as_f64().ok_or_else(|| invalid("missing cx"))?,
                p["cy"].as_f64().ok_or_else(|| invalid("missing cy"))?,
            ),
            side,
            opportunities: p["opportunities"].as_u64().unwrap_or(0),
            col: p["col"].as_i64().ok_or_else(|| invalid("missing col"))? as i32,
            row: p["row"].as_i64().ok_or_else(|| invalid("missing row"))? as i32,
        };
        index.insert((cell.col, cell.row), id);
        cells.push(cell);
    }
    cells.sort_by_key(|c| c.id);
    if cells.iter().enumerate().any(|(i, c)| c.id.0 as usize != i) {
        return Err(invalid("cell ids are not dense"));
    }
    Ok((
        Grid {
            cells,
            bbox_min: Point::new(b[0], b[1]),
            bbox_max: Point::new(b[2], b[3]),
            side,
            index,
        },
        proj,
    ))
}
