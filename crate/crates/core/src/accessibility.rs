//! Earliest-arrival queries over the time-expanded graph and the derived
//! accessibility indicator: opportunities reachable within a time budget,
//! averaged over departure-time samples in a period, and compared across
//! base and augmented schedules.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::Point;
use crate::tessellation::{CellId, Grid};
use crate::transit_graph::{walk_seconds, NodeKind, TimeExpandedGraph};

/// One hour of reachable opportunities.
pub const DEFAULT_TAU_S: u32 = 3600;
/// Departure sampling step inside a period.
pub const DEFAULT_SAMPLE_STEP_S: u32 = 600;
/// Morning peak, 7:00–10:00.
pub const MORNING_PEAK: (u32, u32) = (25_200, 36_000);
/// Evening peak, 16:00–19:00.
pub const EVENING_PEAK: (u32, u32) = (57_600, 68_400);

/// Earliest arrival at every cell centroid for one origin and departure.
#[derive(Debug, Clone, PartialEq)]
pub struct ArrivalProfile {
    pub origin: CellId,
    pub depart_t: u32,
    /// Clock seconds; infinity when out of reach.
    pub arrivals: BTreeMap<CellId, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccessibilityScore {
    pub origin: CellId,
    pub depart_t: u32,
    pub tau: u32,
    /// Opportunities over cells whose centroid is reached within tau.
    pub score: u64,
    pub reachable_cells: usize,
}

/// Earliest arrival from `origin` departing at `depart_t`: walk to any
/// stop within the cap and board any later departure, ride/dwell/transfer
/// through the graph, and reach each centroid either by one egress walk
/// from a vehicle arrival or by walking directly from the origin.
/// Walk-stop-walk chains are deliberately not journeys.
pub fn earliest_arrival(
    graph: &TimeExpandedGraph,
    grid: &Grid,
    origin: Point,
    depart_t: u32,
    walk_speed_mps: f64,
    max_walk_s: f64,
) -> Result<ArrivalProfile> {
    let origin_cell = grid.locate(origin)?;

    // Board: every departure no earlier than the walk to its stop.
    let mut reachable = vec![false; graph.nodes.len()];
    let mut queue: Vec<u32> = Vec::new();
    for (s, stop) in graph.stops.iter().enumerate() {
        let ws = walk_seconds(origin, stop.location, walk_speed_mps);
        if ws > max_walk_s {
            continue;
        }
        let threshold = depart_t as f64 + ws;
        let deps = &graph.departures_by_stop[s];
        let k = deps.partition_point(|&n| (graph.nodes[n as usize].time as f64) < threshold);
        for &n in &deps[k..] {
            if !reachable[n as usize] {
                reachable[n as usize] = true;
                queue.push(n);
            }
        }
    }
    while let Some(n) = queue.pop() {
        for e in &graph.out_edges[n as usize] {
            if !reachable[e.to as usize] {
                reachable[e.to as usize] = true;
                queue.push(e.to);
            }
        }
    }

    // Earliest vehicle arrival per stop.
    let mut stop_arrival = vec![f64::INFINITY; graph.stops.len()];
    for (n, node) in graph.nodes.iter().enumerate() {
        if reachable[n] && node.kind == NodeKind::Arrival {
            let t = node.time as f64;
            if t < stop_arrival[node.stop as usize] {
                stop_arrival[node.stop as usize] = t;
            }
        }
    }

    let mut arrivals = BTreeMap::new();
    for cell in grid.cells() {
        let mut best = f64::INFINITY;
        let direct = walk_seconds(origin, cell.centroid, walk_speed_mps);
        if direct <= max_walk_s {
            best = depart_t as f64 + direct;
        }
        for (s, stop) in graph.stops.iter().enumerate() {
            if stop_arrival[s].is_finite() {
                let egress = walk_seconds(stop.location, cell.centroid, walk_speed_mps);
                if egress <= max_walk_s {
                    best = best.min(stop_arrival[s] + egress);
                }
            }
        }
        arrivals.insert(cell.id, best);
    }
    Ok(ArrivalProfile {
        origin: origin_cell,
        depart_t,
        arrivals,
    })
}

/// Sums opportunities over the cells reached within `tau` seconds.
pub fn accessibility_score(profile: &ArrivalProfile, grid: &Grid, tau: u32) -> AccessibilityScore {
    let horizon = (profile.depart_t + tau) as f64;
    let mut score = 0u64;
    let mut reachable_cells = 0usize;
    for (&cell, &arrival) in &profile.arrivals {
        if arrival <= horizon {
            score += grid.cell(cell).opportunities;
            reachable_cells += 1;
        }
    }
    AccessibilityScore {
        origin: profile.origin,
        depart_t: profile.depart_t,
        tau,
        score,
        reachable_cells,
    }
}

/// Mean score and reachable-cell count over a period's departure samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PeriodScore {
    pub mean_score: f64,
    pub mean_reachable: f64,
}

/// Per-centroid period averages: departures sampled at start,
/// start+step, … over the half-open period. Origins are scored in
/// parallel; aggregation order is fixed by cell id.
pub fn score_period(
    graph: &TimeExpandedGraph,
    grid: &Grid,
    period: (u32, u32),
    sample_step: u32,
    tau: u32,
    walk_speed_mps: f64,
    max_walk_s: f64,
) -> Result<BTreeMap<CellId, PeriodScore>> {
    let (start, end) = period;
    if end <= start || end > 86_400 {
        return Err(Error::InvalidParameter(format!(
            "period [{start}, {end}[ must be non-empty within the day"
        )));
    }
    if sample_step == 0 || (end - start) % sample_step != 0 {
        return Err(Error::InvalidParameter(format!(
            "sample step {sample_step} must divide the period length {}",
            end - start
        )));
    }
    let samples: Vec<u32> = (start..end).step_by(sample_step as usize).collect();
    let scored: Vec<(CellId, PeriodScore)> = grid
        .cells()
        .par_iter()
        .map(|cell| {
            let mut score_sum = 0.0;
            let mut reach_sum = 0.0;
            for &t in &samples {
                let profile =
                    earliest_arrival(graph, grid, cell.centroid, t, walk_speed_mps, max_walk_s)
                        .expect("centroids always locate in their own grid");
                let s = accessibility_score(&profile, grid, tau);
                score_sum += s.score as f64;
                reach_sum += s.reachable_cells as f64;
            }
            let n = samples.len() as f64;
            (
                cell.id,
                PeriodScore {
                    mean_score: score_sum / n,
                    mean_reachable: reach_sum / n,
                },
            )
        })
        .collect();
    Ok(scored.into_iter().collect())
}

/// Per-cell score change, augmented minus base.
pub fn improvement(
    base: &BTreeMap<CellId, PeriodScore>,
    augmented: &BTreeMap<CellId, PeriodScore>,
) -> Result<BTreeMap<CellId, f64>> {
    if base.len() != augmented.len() || !base.keys().eq(augmented.keys()) {
        return Err(Error::InvalidParameter(
            "base and augmented scores cover different cell sets".into(),
        ));
    }
    Ok(base
        .iter()
        .map(|(&c, b)| (c, augmented[&c].mean_score - b.mean_score))
        .collect())
}
