//! Virtual-trip synthesis: field estimates become departure sequences
//! spaced by twice the expected wait (the renewal approximation H = 2·W),
//! each departure paired with an arrival offset by the estimated travel
//! time, and the result is spliced into a copy of the base GTFS feed.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use crate::error::Result;
use crate::geom::Projection;
use crate::geostat::{BucketField, Method};
use crate::gtfs::{write_augmented_feed, FeedAddition, Stop};
use crate::ingest::{Direction, Hub};
use crate::tessellation::{CellId, Grid};

/// Spacing floor keeping the departure recursion finite as ŵ → 0.
pub const DEFAULT_MIN_HEADWAY_FLOOR_S: f64 = 60.0;
/// The recursion anchor: noon. Any anchor yields the same spacing rule.
pub const DEFAULT_ANCHOR_T0_S: f64 = 43_200.0;
/// Departures are generated up to 11:59 pm.
pub const LAST_DEPARTURE_S: f64 = 86_340.0;
/// service_id under which all virtual trips run.
pub const VIRTUAL_SERVICE_ID: &str = "SVC_VIRTUAL_FEEDER";

/// Stop id given to the virtual stop at a cell centroid.
pub fn virtual_stop_id(cell: CellId) -> String {
    format!("VC_{cell}")
}

fn virtual_route_id(hub_id: &str, direction: Direction) -> String {
    format!("VR_{hub_id}_{direction}")
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct SlotEstimate {
    slot_start: u32,
    w_hat: f64,
    y_hat: f64,
    method: Method,
}

/// Piecewise-constant (per timeslot) ŵ/ŷ lookup per (hub, direction,
/// cell), with gap filling: a timeslot without estimates borrows from the
/// nearest estimated slot (earlier slot on ties); a key with no estimates
/// at all has no service.
#[derive(Debug, Clone, Default)]
pub struct FieldLookup {
    map: BTreeMap<(String, Direction), BTreeMap<CellId, Vec<SlotEstimate>>>,
    slot_length: u32,
}

/// One flattened estimate, as stored in the field-estimates CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateRow {
    pub hub_id: String,
    pub direction: Direction,
    pub slot_start: u32,
    pub cell_id: CellId,
    pub w_hat: f64,
    pub y_hat: f64,
    pub method: Method,
}

impl FieldLookup {
    pub fn from_buckets(buckets: &[BucketField]) -> FieldLookup {
        let slot_length = buckets.first().map_or(0, |b| b.key.slot_length);
        debug_assert!(buckets.iter().all(|b| b.key.slot_length == slot_length));
        let rows = buckets.iter().flat_map(|bucket| {
            bucket.estimates.iter().map(|e| EstimateRow {
                hub_id: bucket.key.hub_id.clone(),
                direction: bucket.key.direction,
                slot_start: bucket.key.slot_start,
                cell_id: e.cell_id,
                w_hat: e.w_hat,
                y_hat: e.y_hat,
                method: e.method,
            })
        });
        FieldLookup::from_rows(slot_length, rows)
    }

    pub fn from_rows(slot_length: u32, rows: impl IntoIterator<Item = EstimateRow>) -> FieldLookup {
        let mut out = FieldLookup {
            slot_length,
            ..Default::default()
        };
        for r in rows {
            out.map
                .entry((r.hub_id, r.direction))
                .or_default()
                .entry(r.cell_id)
                .or_default()
                .push(SlotEstimate {
                    slot_start: r.slot_start,
                    w_hat: r.w_hat,
                    y_hat: r.y_hat,
                    method: r.method,
                });
        }
        for per_cell in out.map.values_mut() {
            for slots in per_cell.values_mut() {
                slots.sort_by_key(|s| s.slot_start);
            }
        }
        out
    }

    /// (hub, direction) pairs with any estimates, and their cells.
    pub fn services(&self) -> impl Iterator<Item = (&str, Direction, Vec<CellId>)> {
        self.map.iter().map(|((hub, dir), cells)| {
            (hub.as_str(), *dir, cells.keys().copied().collect())
        })
    }

    fn slot_at(&self, hub: &str, dir: Direction, cell: CellId, t: f64) -> Option<(&SlotEstimate, bool)> {
        let slots = self.map.get(&(hub.to_string(), dir))?.get(&cell)?;
        let slot_len = self.slot_length.max(1) as f64;
        let query = (t / slot_len).floor() * slot_len;
        let mut best: Option<(f64, &SlotEstimate)> = None;
        for s in slots {
            let gap = (s.slot_start as f64 - query).abs();
            // Strict < keeps the earlier slot on ties.
            if best.map_or(true, |(bg, _)| gap < bg) {
                best = Some((gap, s));
            }
        }
        best.map(|(gap, s)| (s, gap != 0.0))
    }

    /// Expected wait at time `t`; the method degrades to FallbackNearest
    /// when the value was borrowed from another timeslot.
    pub fn wait_at(&self, hub: &str, dir: Direction, cell: CellId, t: f64) -> Option<(f64, Method)> {
        self.slot_at(hub, dir, cell, t)
            .map(|(s, gap)| (s.w_hat, if gap { Method::FallbackNearest } else { s.method }))
    }

    pub fn travel_at(&self, hub: &str, dir: Direction, cell: CellId, t: f64) -> Option<(f64, Method)> {
        self.slot_at(hub, dir, cell, t)
            .map(|(s, gap)| (s.y_hat, if gap { Method::FallbackNearest } else { s.method }))
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Departure times for one (cell, hub, direction): starting at the anchor,
/// forward steps of max(2·ŵ(t_prev), floor) until past 11:59 pm, backward
/// steps of max(2·ŵ(t_next), floor) until below midnight. Ascending and
/// strictly increasing; empty when the field has no estimates for the key.
pub fn generate_departures(
    field: &FieldLookup,
    hub: &str,
    dir: Direction,
    cell: CellId,
    anchor_t0: f64,
    floor: f64,
) -> Vec<f64> {
    let headway = |t: f64| -> Option<f64> {
        field
            .wait_at(hub, dir, cell, t)
            .map(|(w, _)| (2.0 * w).max(floor))
    };
    if headway(anchor_t0).is_none() {
        return Vec::new();
    }
    let mut times = Vec::new();
    let mut t = anchor_t0;
    loop {
        let next = t + headway(t).expect("estimates cover the whole day via gap filling");
        if next > LAST_DEPARTURE_S {
            break;
        }
        times.push(next);
        t = next;
    }
    let mut t = anchor_t0;
    loop {
        let prev = t - headway(t).expect("estimates cover the whole day via gap filling");
        if prev < 0.0 {
            break;
        }
        times.push(prev);
        t = prev;
    }
    if (0.0..=LAST_DEPARTURE_S).contains(&anchor_t0) {
        times.push(anchor_t0);
    }
    times.sort_by(|a, b| a.partial_cmp(b).expect("finite departure times"));
    times
}

/// One synthesized feeder connection between a cell centroid and a hub.
#[derive(Debug, Clone, PartialEq)]
pub struct VirtualTrip {
    pub trip_id: String,
    pub direction: Direction,
    pub cell_id: CellId,
    pub hub_id: String,
    /// Whole seconds; access trips depart at the centroid, egress trips at
    /// the hub.
    pub depart_s: u32,
    pub arrive_s: u32,
    /// Field values at the departure time, for the audit trail.
    pub w_hat: f64,
    pub y_hat: f64,
}

/// Builds trips for one (cell, hub, direction) from its departure times.
/// Arrivals are offset by ŷ at the departure's timeslot; trips arriving
/// after midnight are dropped and counted.
pub fn build_virtual_trips(
    departures: &[f64],
    field: &FieldLookup,
    hub: &str,
    dir: Direction,
    cell: CellId,
) -> (Vec<VirtualTrip>, usize) {
    let mut trips = Vec::new();
    let mut dropped = 0usize;
    for (i, &t) in departures.iter().enumerate() {
        let Some((y, _)) = field.travel_at(hub, dir, cell, t) else {
            continue;
        };
        let (w, _) = field.wait_at(hub, dir, cell, t).expect("same key as travel");
        let depart_s = t.round() as u32;
        // Travel is floored at one second so rounding never collapses a
        // trip into a zero-duration ride.
        let arrive_s = ((t + y).round() as u32).max(depart_s + 1);
        if arrive_s > 86_400 {
            dropped += 1;
            continue;
        }
        trips.push(VirtualTrip {
            trip_id: format!("VT_{hub}_{dir}_{cell}_{i}"),
            direction: dir,
            cell_id: cell,
            hub_id: hub.to_string(),
            depart_s,
            arrive_s,
            w_hat: w,
            y_hat: y,
        });
    }
    (trips, dropped)
}

/// Generates the full day of virtual trips for every (hub, direction,
/// cell) carrying estimates. Deterministic order: hub, direction, cell.
pub fn synthesize_trips(field: &FieldLookup, anchor_t0: f64, floor: f64) -> (Vec<VirtualTrip>, usize) {
    let mut all = Vec::new();
    let mut dropped = 0usize;
    for (hub, dir, cells) in field.services() {
        for cell in cells {
            let deps = generate_departures(field, hub, dir, cell, anchor_t0, floor);
            let (trips, d) = build_virtual_trips(&deps, field, hub, dir, cell);
            all.extend(trips);
            dropped += d;
        }
    }
    (all, dropped)
}

/// Splices the virtual trips into a copy of the base feed: one stop per
/// served centroid (`VC_<cell>`), one bus route per (hub, direction), one
/// trip with two stoptimes per connection, all under a dedicated
/// service_id active on the modeled day.
pub fn emit_gtfs(
    trips: &[VirtualTrip],
    grid: &Grid,
    hubs: &[Hub],
    proj: &Projection,
    base_dir: &Path,
    out_dir: &Path,
    service_date: &str,
) -> Result<()> {
    let hub_stop: BTreeMap<&str, &str> = hubs
        .iter()
        .map(|h| (h.id.as_str(), h.gtfs_stop_id.as_str()))
        .collect();

    let mut cells = BTreeSet::new();
    let mut routes = BTreeSet::new();
    for t in trips {
        cells.insert(t.cell_id);
        routes.insert((t.hub_id.clone(), t.direction));
    }

    let mut add = FeedAddition {
        service: Some((VIRTUAL_SERVICE_ID.to_string(), service_date.to_string())),
        ..Default::default()
    };
    for cell in cells {
        let (lon, lat) = proj.inverse(grid.centroid(cell));
        add.stops.push(Stop {
            stop_id: virtual_stop_id(cell),
            name: format!("virtual centroid {cell}"),
            lon,
            lat,
        });
    }
    for (hub_id, dir) in routes {
        add.routes.push((
            virtual_route_id(&hub_id, dir),
            format!("virtual feeder {hub_id} {dir}"),
            3, // bus
        ));
    }
    for t in trips {
        let hub_stop_id = hub_stop.get(t.hub_id.as_str()).copied().unwrap_or_default();
        let centroid_stop = virtual_stop_id(t.cell_id);
        let (from, to) = match t.direction {
            Direction::Access => (centroid_stop.as_str(), hub_stop_id),
            Direction::Egress => (hub_stop_id, centroid_stop.as_str()),
        };
        add.trips.push((
            virtual_route_id(&t.hub_id, t.direction),
            VIRTUAL_SERVICE_ID.to_string(),
            t.trip_id.clone(),
        ));
        add.stop_times
            .push((t.trip_id.clone(), t.depart_s, t.depart_s, from.to_string(), 1));
        add.stop_times
            .push((t.trip_id.clone(), t.arrive_s, t.arrive_s, to.to_string(), 2));
    }
    write_augmented_feed(base_dir, out_dir, &add)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geostat::{BucketField, FieldDiag, FieldEstimate};
    use crate::ingest::TimeslotKey;

    fn diag(method: Method) -> FieldDiag {
        FieldDiag {
            method,
            model: None,
            variogram: None,
            clamped: 0,
        }
    }

    /// One bucket covering the given slot with uniform (w, y) at `cells`.
    fn bucket(hub: &str, dir: Direction, slot_start: u32, cells: &[u32], w: f64, y: f64) -> BucketField {
        BucketField {
            key: TimeslotKey {
                hub_id: hub.into(),
                direction: dir,
                slot_start,
                slot_length: 3600,
            },
            n_obs: 9,
            estimates: cells
                .iter()
                .map(|&c| FieldEstimate {
                    cell_id: CellId(c),
                    w_hat: w,
                    y_hat: y,
                    n_obs: 9,
                    method: Method::Kriging,
                })
                .collect(),
            wait: diag(Method::Kriging),
            travel: diag(Method::Kriging),
            stationarity: None,
        }
    }

    fn constant_field(w: f64, y: f64) -> FieldLookup {
        // Estimates in a single slot; gap filling extends them day-wide.
        FieldLookup::from_buckets(&[bucket("H1", Direction::Access, 43200, &[3], w, y)])
    }

    #[test]
    fn constant_wait_spaces_departures_exactly() {
        let field = constant_field(300.0, 420.0);
        let deps = generate_departures(&field, "H1", Direction::Access, CellId(3), 43200.0, 60.0);
        assert_eq!(deps.len(), 144);
        assert_eq!(deps[0], 0.0);
        assert_eq!(*deps.last().unwrap(), 85800.0);
        for pair in deps.windows(2) {
            assert_eq!(pair[1] - pair[0], 600.0);
        }
        assert!(deps.contains(&43200.0), "anchor itself is a departure");
    }

    #[test]
    fn headway_floor_binds_small_waits() {
        let field = constant_field(10.0, 420.0);
        let deps = generate_departures(&field, "H1", Direction::Access, CellId(3), 43200.0, 60.0);
        for pair in deps.windows(2) {
            assert_eq!(pair[1] - pair[0], 60.0);
        }
    }

    #[test]
    fn no_estimates_means_no_service() {
        let field = constant_field(300.0, 420.0);
        assert!(generate_departures(&field, "H1", Direction::Egress, CellId(3), 43200.0, 60.0).is_empty());
        assert!(generate_departures(&field, "H2", Direction::Access, CellId(3), 43200.0, 60.0).is_empty());
        assert!(generate_departures(&field, "H1", Direction::Access, CellId(9), 43200.0, 60.0).is_empty());
    }

    /// Step-by-step restatement of the recursion, kept deliberately
    /// independent of the production iterator.
    fn recursion_oracle(w_of: impl Fn(f64) -> f64, anchor: f64, floor: f64) -> Vec<f64> {
        let mut seq = vec![anchor];
        let mut t = anchor;
        loop {
            let n = t + (2.0 * w_of(t)).max(floor);
            if n > 86340.0 {
                break;
            }
            seq.push(n);
            t = n;
        }
        t = anchor;
        loop {
            let p = t - (2.0 * w_of(t)).max(floor);
            if p < 0.0 {
                break;
            }
            seq.push(p);
            t = p;
        }
        seq.sort_by(|a, b| a.partial_cmp(b).unwrap());
        seq
    }

    #[test]
    fn piecewise_field_matches_direct_recursion_oracle() {
        // ŵ = 300 s before noon, 600 s from noon on, estimated in two slots.
        let buckets = vec![
            bucket("H1", Direction::Access, 39600, &[3], 300.0, 420.0),
            bucket("H1", Direction::Access, 43200, &[3], 600.0, 480.0),
        ];
        let field = FieldLookup::from_buckets(&buckets);
        let deps = generate_departures(&field, "H1", Direction::Access, CellId(3), 43200.0, 60.0);

        // Gap filling maps every slot to its nearest estimated slot: the
        // boundary between the two sits at 43200 exactly (41400..<43200
        // is nearer to 39600... compute per slot start).
        let w_of = |t: f64| {
            let slot = (t / 3600.0).floor() * 3600.0;
            if (slot - 39600.0).abs() <= (slot - 43200.0).abs() {
                300.0
            } else {
                600.0
            }
        };
        let oracle = recursion_oracle(w_of, 43200.0, 60.0);
        assert_eq!(deps, oracle);
        for pair in deps.windows(2) {
            assert!(pair[1] > pair[0]);
        }
    }

    #[test]
    fn gap_filling_prefers_exact_then_nearest_then_earlier() {
        let buckets = vec![
            bucket("H1", Direction::Access, 25200, &[3], 100.0, 400.0),
            bucket("H1", Direction::Access, 32400, &[3], 200.0, 500.0),
        ];
        let field = FieldLookup::from_buckets(&buckets);
        let at = |t: f64| field.wait_at("H1", Direction::Access, CellId(3), t).unwrap();

        assert_eq!(at(25200.0), (100.0, Method::Kriging)); // exact slot
        assert_eq!(at(27000.0), (100.0, Method::Kriging)); // same slot
        assert_eq!(at(36_000.0), (200.0, Method::FallbackNearest)); // nearest
        // 28800 is equidistant from both estimated slots: earlier wins.
        assert_eq!(at(28800.0), (100.0, Method::FallbackNearest));
    }

    #[test]
    fn access_trips_arrive_travel_later_and_egress_mirrors() {
        let field = constant_field(300.0, 420.0);
        let (trips, dropped) = build_virtual_trips(
            &[43200.0],
            &field,
            "H1",
            Direction::Access,
            CellId(3),
        );
        assert_eq!(dropped, 0);
        assert_eq!(trips.len(), 1);
        assert_eq!(trips[0].depart_s, 43200);
        assert_eq!(trips[0].arrive_s, 43620); // 12:00 + 420 s = 12:07
        assert_eq!(trips[0].w_hat, 300.0);
        assert_eq!(trips[0].y_hat, 420.0);

        let egress_field = FieldLookup::from_buckets(&[bucket(
            "H1",
            Direction::Egress,
            43200,
            &[3],
            300.0,
            420.0,
        )]);
        let (etrips, _) =
            build_virtual_trips(&[43200.0], &egress_field, "H1", Direction::Egress, CellId(3));
        assert_eq!(etrips[0].arrive_s - etrips[0].depart_s, 420);
        assert_eq!(etrips[0].direction, Direction::Egress);
    }

    #[test]
    fn trips_arriving_past_midnight_are_dropped() {
        let field = constant_field(300.0, 3600.0);
        let (trips, dropped) =
            build_virtual_trips(&[85800.0, 43200.0], &field, "H1", Direction::Access, CellId(3));
        assert_eq!(dropped, 1); // 85800 + 3600 = 89400 > 86400
        assert_eq!(trips.len(), 1);
        assert_eq!(trips[0].depart_s, 43200);
    }

    #[test]
    fn rounding_never_collapses_a_trip() {
        let field = constant_field(300.0, 0.2);
        let (trips, _) =
            build_virtual_trips(&[43200.4], &field, "H1", Direction::Access, CellId(3));
        assert_eq!(trips[0].depart_s, 43200);
        assert!(trips[0].arrive_s > trips[0].depart_s);
    }

    #[test]
    fn full_day_pipeline_matches_composed_oracle() {
        let buckets = vec![
            bucket("H1", Direction::Access, 28800, &[5], 450.0, 700.0),
            bucket("H1", Direction::Access, 61200, &[5], 250.0, 520.0),
        ];
        let field = FieldLookup::from_buckets(&buckets);
        let (trips, dropped) = synthesize_trips(&field, 43200.0, 60.0);

        let w_of = |t: f64| {
            let slot = (t / 3600.0).floor() * 3600.0;
            if (slot - 28800.0).abs() <= (slot - 61200.0).abs() {
                450.0
            } else {
                250.0
            }
        };
        let y_of = |t: f64| {
            let slot = (t / 3600.0).floor() * 3600.0;
            if (slot - 28800.0).abs() <= (slot - 61200.0).abs() {
                700.0
            } else {
                520.0
            }
        };
        let deps = recursion_oracle(w_of, 43200.0, 60.0);
        let expected: Vec<(u32, u32)> = deps
            .iter()
            .filter_map(|&t| {
                let d = t.round() as u32;
                let a = ((t + y_of(t)).round() as u32).max(d + 1);
                (a <= 86400).then_some((d, a))
            })
            .collect();
        assert_eq!(trips.len(), expected.len());
        assert_eq!(dropped, deps.len() - expected.len());
        for (trip, (d, a)) in trips.iter().zip(&expected) {
            assert_eq!((trip.depart_s, trip.arrive_s), (*d, *a));
        }
    }

    #[test]
    fn emission_round_trips_through_the_feed() {
        let base = tempfile::tempdir().unwrap();
        crate::gtfs::tests::minimal_feed(base.path());
        let out = tempfile::tempdir().unwrap();

        let grid = crate::tessellation::tessellate(
            crate::geom::Point::new(0.0, 0.0),
            crate::geom::Point::new(4000.0, 4000.0),
            1000.0,
        )
        .unwrap();
        let hubs = vec![Hub {
            id: "H1".into(),
            location: grid.centroid(CellId(0)),
            gtfs_stop_id: "A".into(),
        }];
        let field = FieldLookup::from_buckets(&[
            bucket("H1", Direction::Access, 43200, &[2, 4], 300.0, 420.0),
            bucket("H1", Direction::Egress, 43200, &[2], 280.0, 390.0),
        ]);
        let (trips, _) = synthesize_trips(&field, 43200.0, 60.0);
        assert!(!trips.is_empty());
        emit_gtfs(
            &trips,
            &grid,
            &hubs,
            &Projection::Identity,
            base.path(),
            out.path(),
            "20240115",
        )
        .unwrap();

        let sched = crate::gtfs::parse_gtfs(out.path(), "20240115").unwrap();
        let by_id: BTreeMap<&str, &crate::gtfs::Trip> = sched
            .trips
            .iter()
            .map(|t| (t.trip_id.as_str(), t))
            .collect();
        for vt in &trips {
            let parsed = by_id
                .get(vt.trip_id.as_str())
                .unwrap_or_else(|| panic!("trip {} missing from feed", vt.trip_id));
            assert_eq!(parsed.stop_times.len(), 2);
            assert_eq!(parsed.stop_times[0].departure_s, vt.depart_s);
            assert_eq!(parsed.stop_times[1].arrival_s, vt.arrive_s);
            let (from, to) = (
                parsed.stop_times[0].stop_id.as_str(),
                parsed.stop_times[1].stop_id.as_str(),
            );
            match vt.direction {
                Direction::Access => {
                    assert_eq!(from, virtual_stop_id(vt.cell_id));
                    assert_eq!(to, "A");
                }
                Direction::Egress => {
                    assert_eq!(from, "A");
                    assert_eq!(to, virtual_stop_id(vt.cell_id));
                }
            }
        }
        // Virtual stops exist only for served centroids.
        assert!(sched.stops.contains_key("VC_2"));
        assert!(sched.stops.contains_key("VC_4"));
        assert!(!sched.stops.contains_key("VC_0"));
    }
}
