//! Time-expanded transit graph: every stoptime becomes an Arrival and a
//! Departure node; rides chain a trip's rows, dwells let riders stay on
//! board, and walk transfers link an arrival to the earliest catchable
//! departure of each other trip within walking reach.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::geom::{Point, Projection};
use crate::gtfs::Schedule;

/// 5 km/h. The division 1000 m / (5/3.6) m/s is exact in f64: 720 s.
pub const DEFAULT_WALK_SPEED_MPS: f64 = 5.0 / 3.6;
/// Walks (transfer, access, egress) are capped at 15 minutes.
pub const DEFAULT_MAX_WALK_S: f64 = 900.0;

/// Straight-line walking time between two projected points.
pub fn walk_seconds(a: Point, b: Point, speed_mps: f64) -> f64 {
    a.distance(b) / speed_mps
}

/// Stop-to-stop walking times: straight-line by default, with an optional
/// precomputed matrix overriding listed directed pairs (unlisted pairs
/// fall back to straight-line). The same-stop walk is always zero.
#[derive(Debug, Clone)]
pub enum WalkModel {
    Euclidean { speed_mps: f64 },
    Matrix {
        speed_mps: f64,
        overrides: BTreeMap<(String, String), f64>,
    },
}

impl Default for WalkModel {
    fn default() -> Self {
        WalkModel::Euclidean {
            speed_mps: DEFAULT_WALK_SPEED_MPS,
        }
    }
}

impl WalkModel {
    pub fn speed_mps(&self) -> f64 {
        match self {
            WalkModel::Euclidean { speed_mps } | WalkModel::Matrix { speed_mps, .. } => *speed_mps,
        }
    }

    fn stop_walk_s(&self, from: &GraphStop, to: &GraphStop) -> f64 {
        if from.stop_id == to.stop_id {
            return 0.0;
        }
        if let WalkModel::Matrix { overrides, .. } = self {
            if let Some(&s) = overrides.get(&(from.stop_id.clone(), to.stop_id.clone())) {
                return s;
            }
        }
        walk_seconds(from.location, to.location, self.speed_mps())
    }
}

#[derive(Debug, Deserialize)]
struct WalkRow {
    from_stop_id: String,
    to_stop_id: String,
    walk_s: f64,
}

/// Reads a `from_stop_id,to_stop_id,walk_s` matrix CSV.
pub fn load_walk_matrix(path: &Path) -> Result<BTreeMap<(String, String), f64>> {
    let ctx = || format!("reading walk matrix {}", path.display());
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::csv(ctx(), e))?;
    let mut out = BTreeMap::new();
    for row in rdr.deserialize::<WalkRow>() {
        let row = row.map_err(|e| Error::csv(ctx(), e))?;
        if !row.walk_s.is_finite() || row.walk_s < 0.0 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: format!(
                    "walk_s must be a non-negative number, got {} for {} -> {}",
                    row.walk_s, row.from_stop_id, row.to_stop_id
                ),
            });
        }
        out.insert((row.from_stop_id, row.to_stop_id), row.walk_s);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct GraphParams {
    pub walk: WalkModel,
    pub max_walk_s: f64,
    /// Extra seconds required on top of the walk when changing vehicles.
    pub transfer_buffer_s: f64,
}

impl Default for GraphParams {
    fn default() -> Self {
        GraphParams {
            walk: WalkModel::default(),
            max_walk_s: DEFAULT_MAX_WALK_S,
            transfer_buffer_s: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum NodeKind {
    Arrival,
    Departure,
}

/// One stoptime event. `stop` and `trip` index into the graph's tables.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoptimeNode {
    pub stop: u32,
    pub time: u32,
    pub trip: u32,
    pub kind: NodeKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum EdgeKind {
    Ride,
    Dwell,
    Transfer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Edge {
    pub to: u32,
    pub kind: EdgeKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphStop {
    pub stop_id: String,
    pub location: Point,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TimeExpandedGraph {
    pub nodes: Vec<StoptimeNode>,
    /// Adjacency: out_edges[n] are the edges leaving node n.
    pub out_edges: Vec<Vec<Edge>>,
    pub stops: Vec<GraphStop>,
    pub stop_index: BTreeMap<String, u32>,
    pub trip_ids: Vec<String>,
    /// Departure node ids per stop, sorted by (time, node id).
    pub departures_by_stop: Vec<Vec<u32>>,
}

impl TimeExpandedGraph {
    pub fn edge_count(&self) -> usize {
        self.out_edges.iter().map(Vec::len).sum()
    }

    /// All (from, to, kind) triples, in adjacency order.
    pub fn edges(&self) -> impl Iterator<Item = (u32, u32, EdgeKind)> + '_ {
        self.out_edges
            .iter()
            .enumerate()
            .flat_map(|(from, es)| es.iter().map(move |e| (from as u32, e.to, e.kind)))
    }
}

/// Builds the time-expanded graph for one service day. Stop locations are
/// projected to planar meters; transfer edges are pruned to the earliest
/// feasible departure per (arrival node, other trip), which preserves all
/// earliest-arrival answers because a trip boarded earlier passes every
/// later boarding point.
pub fn build_graph(schedule: &Schedule, proj: &Projection, params: &GraphParams) -> TimeExpandedGraph {
    let mut g = TimeExpandedGraph::default();
    for (stop_id, stop) in &schedule.stops {
        g.stop_index.insert(stop_id.clone(), g.stops.len() as u32);
        g.stops.push(GraphStop {
            stop_id: stop_id.clone(),
            location: proj.forward(stop.lon, stop.lat),
        });
    }

    // Nodes, rides and dwells, in (trip, stop_sequence) order.
    for trip in &schedule.trips {
        let trip_idx = g.trip_ids.len() as u32;
        g.trip_ids.push(trip.trip_id.clone());
        let mut prev_dep: Option<u32> = None;
        for st in &trip.stop_times {
            let stop = g.stop_index[&st.stop_id];
            let arr_id = g.nodes.len() as u32;
            g.nodes.push(StoptimeNode {
                stop,
                time: st.arrival_s,
                trip: trip_idx,
                kind: NodeKind::Arrival,
            });
            let dep_id = arr_id + 1;
            g.nodes.push(StoptimeNode {
                stop,
                time: st.departure_s,
                trip: trip_idx,
                kind: NodeKind::Departure,
            });
            g.out_edges.push(Vec::new());
            g.out_edges.push(Vec::new());
            g.out_edges[arr_id as usize].push(Edge {
                to: dep_id,
                kind: EdgeKind::Dwell,
            });
            if let Some(p) = prev_dep {
                g.out_edges[p as usize].push(Edge {
                    to: arr_id,
                    kind: EdgeKind::Ride,
                });
            }
            prev_dep = Some(dep_id);
        }
    }

    // Walking reach between stops, including the zero-length self walk.
    let n_stops = g.stops.len();
    let mut reach: Vec<Vec<(u32, f64)>> = vec![Vec::new(); n_stops];
    for i in 0..n_stops {
        for j in 0..n_stops {
            let w = params.walk.stop_walk_s(&g.stops[i], &g.stops[j]);
            if w <= params.max_walk_s {
                reach[i].push((j as u32, w));
            }
        }
    }

    // Departures grouped by stop and trip, time-sorted, for transfer
    // lookups and for boarding from an origin walk.
    let mut dep_by_stop_trip: Vec<BTreeMap<u32, Vec<(u32, u32)>>> = vec![BTreeMap::new(); n_stops];
    for (id, node) in g.nodes.iter().enumerate() {
        if node.kind == NodeKind::Departure {
            dep_by_stop_trip[node.stop as usize]
                .entry(node.trip)
                .or_default()
                .push((node.time, id as u32));
        }
    }
    for per_stop in &mut dep_by_stop_trip {
        for deps in per_stop.values_mut() {
            deps.sort_unstable();
        }
    }
    g.departures_by_stop = dep_by_stop_trip
        .iter()
        .map(|per_stop| {
            let mut all: Vec<(u32, u32)> = per_stop.values().flatten().copied().collect();
            all.sort_unstable();
            all.into_iter().map(|(_, id)| id).collect()
        })
        .collect();

    // Transfers: earliest feasible departure of each other trip over all
    // stops in reach; ties broken toward the lowest node id.
    for a in 0..g.nodes.len() {
        if g.nodes[a].kind != NodeKind::Arrival {
            continue;
        }
        let (a_stop, a_time, a_trip) = (g.nodes[a].stop, g.nodes[a].time, g.nodes[a].trip);
        let mut best: BTreeMap<u32, (u32, u32)> = BTreeMap::new();
        for &(s, wt) in &reach[a_stop as usize] {
            let threshold = a_time as f64 + wt + params.transfer_buffer_s;
            for (&trip, deps) in &dep_by_stop_trip[s as usize] {
                if trip == a_trip {
                    continue;
                }
                let k = deps.partition_point(|&(t, _)| (t as f64) < threshold);
                if let Some(&cand) = deps.get(k) {
                    let e = best.entry(trip).or_insert(cand);
                    if cand < *e {
                        *e = cand;
                    }
                }
            }
        }
        for (_, (_, dep_id)) in best {
            g.out_edges[a].push(Edge {
                to: dep_id,
                kind: EdgeKind::Transfer,
            });
        }
    }
    g
}
