//! Observed feeder-trip ingestion: load the trip log, classify each row as
//! access (toward a hub) or egress (away from one), derive per-hub feeder
//! areas, and group observations into timeslots for field estimation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Point, Projection};
use crate::gtfs::parse_hms;
use crate::tessellation::{CellId, Grid};

/// Endpoints within this distance of the named hub count as "at" the hub.
pub const DEFAULT_SNAP_RADIUS_M: f64 = 50.0;
/// One-hour timeslots preserve the temporal demand pattern.
pub const DEFAULT_SLOT_LENGTH_S: u32 = 3600;

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Trip toward the hub: the rider boards transit there.
    Access,
    /// Trip away from the hub, back into the feeder area.
    Egress,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Access => "access",
            Direction::Egress => "egress",
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Direction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "access" => Ok(Direction::Access),
            "egress" => Ok(Direction::Egress),
            other => Err(Error::InvalidParameter(format!(
                "bad direction `{other}`, expected access or egress"
            ))),
        }
    }
}

/// A transit stop selected as a feeder target.
#[derive(Debug, Clone, PartialEq)]
pub struct Hub {
    pub id: String,
    pub location: Point,
    pub gtfs_stop_id: String,
}

/// One observed feeder trip, classified.
#[derive(Debug, Clone, PartialEq)]
pub struct TripObservation {
    /// 1-based data row in the source CSV, for audit trails.
    pub source_row: u64,
    pub hub_id: String,
    pub direction: Direction,
    /// Request time, seconds since midnight, < 86400.
    pub request_s: u32,
    pub origin: Point,
    pub destination: Point,
    pub wait_s: f64,
    pub travel_s: f64,
}

impl TripObservation {
    /// The non-hub endpoint: where the rider is picked up (access) or
    /// dropped off (egress).
    pub fn anchor(&self) -> Point {
        match self.direction {
            Direction::Access => self.origin,
            Direction::Egress => self.destination,
        }
    }
}

/// Row that failed ingestion, with a short machine-readable reason.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reject {
    pub row: u64,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct Ingested {
    pub observations: Vec<TripObservation>,
    pub rejects: Vec<Reject>,
    pub direction_column_present: bool,
}

/// Circle around a hub spanned by its observed trips, as grid cells.
#[derive(Debug, Clone, PartialEq)]
pub struct FeederArea {
    pub hub_id: String,
    pub radius_m: f64,
    pub cell_ids: BTreeSet<CellId>,
}

/// Estimation bucket key: one hub, one direction, one timeslot.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TimeslotKey {
    pub hub_id: String,
    pub direction: Direction,
    /// Slot start, a multiple of `slot_length`; the slot is half-open
    /// [slot_start, slot_start + slot_length[.
    pub slot_start: u32,
    pub slot_length: u32,
}

/// Reads the hubs CSV (`hub_id,lon,lat,gtfs_stop_id`), projecting
/// locations into the working plane.
pub fn load_hubs(path: &Path, proj: &Projection) -> Result<Vec<Hub>> {
    let ctx = || format!("reading {}", path.display());
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::csv(ctx(), e))?;
    let headers = rdr.headers().map_err(|e| Error::csv(ctx(), e))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::MissingColumn {
                path: path.to_path_buf(),
                column: name.to_string(),
            })
    };
    let (c_id, c_lon, c_lat, c_stop) =
        (col("hub_id")?, col("lon")?, col("lat")?, col("gtfs_stop_id")?);

    let mut hubs = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::csv(ctx(), e))?;
        let field = |idx: usize| rec.get(idx).unwrap_or("").trim().to_string();
        let parse_coord = |idx: usize, what: &str| -> Result<f64> {
            field(idx).parse().map_err(|_| Error::Format {
                path: path.to_path_buf(),
                message: format!("row {}: bad {what}", i + 2),
            })
        };
        let id = field(c_id);
        if id.is_empty() {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: format!("row {}: empty hub_id", i + 2),
            });
        }
        if !seen.insert(id.clone()) {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: format!("row {}: duplicate hub_id `{id}`", i + 2),
            });
        }
        hubs.push(Hub {
            id,
            location: proj.forward(parse_coord(c_lon, "lon")?, parse_coord(c_lat, "lat")?),
            gtfs_stop_id: field(c_stop),
        });
    }
    Ok(hubs)
}

/// Loads and classifies the observations CSV.
///
/// Expected header: `request_time,origin_lon,origin_lat,dest_lon,dest_lat,
/// hub_id,wait_s,travel_s`, plus an optional `direction` column whose
/// non-empty values override geometric classification. Rows that cannot be
/// classified are collected as rejects, never dropped silently.
pub fn load_observations(
    path: &Path,
    hubs: &[Hub],
    snap_radius_m: f64,
    proj: &Projection,
) -> Result<Ingested> {
    let ctx = || format!("reading {}", path.display());
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::csv(ctx(), e))?;
    let headers = rdr.headers().map_err(|e| Error::csv(ctx(), e))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::MissingColumn {
                path: path.to_path_buf(),
                column: name.to_string(),
            })
    };
    let c_time = col("request_time")?;
    let c_olon = col("origin_lon")?;
    let c_olat = col("origin_lat")?;
    let c_dlon = col("dest_lon")?;
    let c_dlat = col("dest_lat")?;
    let c_hub = col("hub_id")?;
    let c_wait = col("wait_s")?;
    let c_travel = col("travel_s")?;
    let c_dir = headers.iter().position(|h| h.trim() == "direction");

    let hub_map: BTreeMap<&str, &Hub> = hubs.iter().map(|h| (h.id.as_str(), h)).collect();

    let mut out = Ingested {
        direction_column_present: c_dir.is_some(),
        ..Default::default()
    };
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::csv(ctx(), e))?;
        let row = (i + 1) as u64;
        let reject = |reason: &str, rejects: &mut Vec<Reject>| {
            rejects.push(Reject {
                row,
                reason: reason.to_string(),
            });
        };
        let field = |idx: usize| rec.get(idx).unwrap_or("").trim();

        let request_s = match parse_hms(field(c_time)) {
            Ok(t) if t < 86400 => t,
            _ => {
                reject("bad_time", &mut out.rejects);
                continue;
            }
        };
        let mut nums = [0.0f64; 6];
        let mut ok = true;
        for (slot, idx) in nums
            .iter_mut()
            .zip([c_olon, c_olat, c_dlon, c_dlat, c_wait, c_travel])
        {
            match field(idx).parse::<f64>() {
                Ok(v) if v.is_finite() => *slot = v,
                _ => {
                    ok = false;
                    break;
                }
            }
        }
        if !ok {
            reject("bad_number", &mut out.rejects);
            continue;
        }
        let [olon, olat, dlon, dlat, wait_s, travel_s] = nums;
        if wait_s < 0.0 {
            reject("negative_wait", &mut out.rejects);
            continue;
        }
        if travel_s < 0.0 {
            reject("negative_travel", &mut out.rejects);
            continue;
        }
        let Some(hub) = hub_map.get(field(c_hub)) else {
            reject("unknown_hub", &mut out.rejects);
            continue;
        };
        let origin = proj.forward(olon, olat);
        let destination = proj.forward(dlon, dlat);

        let direction = match c_dir.map(|idx| field(idx)).filter(|s| !s.is_empty()) {
            Some(raw) => match raw.parse::<Direction>() {
                Ok(d) => d,
                Err(_) => {
                    reject("bad_direction", &mut out.rejects);
                    continue;
                }
            },
            None => {
                let origin_at_hub = origin.distance(hub.location) <= snap_radius_m;
                let dest_at_hub = destination.distance(hub.location) <= snap_radius_m;
                match (origin_at_hub, dest_at_hub) {
                    (false, true) => Direction::Access,
                    (true, false) => Direction::Egress,
                    (true, true) => {
                        reject("ambiguous", &mut out.rejects);
                        continue;
                    }
                    (false, false) => {
                        reject("unclassifiable", &mut out.rejects);
                        continue;
                    }
                }
            }
        };

        out.observations.push(TripObservation {
            source_row: row,
            hub_id: hub.id.clone(),
            direction,
            request_s,
            origin,
            destination,
            wait_s,
            travel_s,
        });
    }
    Ok(out)
}

/// Feeder area of one hub: radius = the farthest anchor *cell centroid*
/// among its observations, membership = every cell whose centroid lies
/// within that radius. No observations means an empty area.
pub fn feeder_area(hub: &Hub, obs: &[TripObservation], grid: &Grid) -> Result<FeederArea> {
    let mut radius: f64 = 0.0;
    let mut any = false;
    for o in obs.iter().filter(|o| o.hub_id == hub.id) {
        let cell = grid.locate(o.anchor())?;
        radius = radius.max(hub.location.distance(grid.centroid(cell)));
        any = true;
    }
    let mut cell_ids = BTreeSet::new();
    if any {
        for cell in grid.cells() {
            if hub.location.distance(cell.centroid) <= radius {
                cell_ids.insert(cell.id);
            }
        }
    }
    Ok(FeederArea {
        hub_id: hub.id.clone(),
        radius_m: radius,
        cell_ids,
    })
}

/// Groups observation indices by (hub, direction, timeslot). Slots are
/// half-open `[k·slot_length, (k+1)·slot_length[`.
pub fn group_by_timeslot(
    obs: &[TripObservation],
    slot_length: u32,
) -> Result<BTreeMap<TimeslotKey, Vec<usize>>> {
    if slot_length == 0 || 86400 % slot_length != 0 {
        return Err(Error::InvalidParameter(format!(
            "slot length {slot_length} s must divide 86400"
        )));
    }
    let mut buckets: BTreeMap<TimeslotKey, Vec<usize>> = BTreeMap::new();
    for (i, o) in obs.iter().enumerate() {
        let key = TimeslotKey {
            hub_id: o.hub_id.clone(),
            direction: o.direction,
            slot_start: o.request_s / slot_length * slot_length,
            slot_length,
        };
        buckets.entry(key).or_default().push(i);
    }
    Ok(buckets)
}
