//! Staged pipeline over file artifacts. Each stage reads the config
//! inputs and/or earlier stages' files from the output directory, writes
//! its own files, and records its counts in `report.json`. All artifacts
//! are plain CSV/GeoJSON/GTFS; every float is written in shortest
//! round-trip form so downstream stages reload values bit-exactly.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde_json::json;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::geom::{Point, Projection};
use crate::geostat::{krige_field, BucketField, KrigeParams, Method, DEFAULT_LAG_BINS};
use crate::gtfs::parse_gtfs;
use crate::ingest::{
    feeder_area, group_by_timeslot, load_hubs, load_observations, Direction, FeederArea, Hub,
    Reject, TimeslotKey, TripObservation,
};
use crate::synth::{
    emit_gtfs, synthesize_trips, EstimateRow, FieldLookup, VirtualTrip, DEFAULT_ANCHOR_T0_S,
};
use crate::tessellation::{grid_from_geojson, grid_to_geojson, tessellate, CellId, Grid};
use crate::transit_graph::{build_graph, load_walk_matrix, GraphParams, WalkModel};
use crate::accessibility::{improvement, score_period, PeriodScore};

use rayon::prelude::*;

pub const GRID_GEOJSON: &str = "grid.geojson";
pub const OBSERVATIONS_CSV: &str = "observations_classified.csv";
pub const REJECTS_CSV: &str = "rejects.csv";
pub const FEEDER_AREAS_CSV: &str = "feeder_areas.csv";
pub const FIELD_ESTIMATES_CSV: &str = "field_estimates.csv";
pub const DIAGNOSTICS_WAIT_CSV: &str = "diagnostics_wait.csv";
pub const DIAGNOSTICS_TRAVEL_CSV: &str = "diagnostics_travel.csv";
pub const VARIOGRAMS_DIR: &str = "variograms";
pub const VIRTUAL_TRIPS_CSV: &str = "virtual_trips.csv";
pub const GTFS_AUGMENTED_DIR: &str = "gtfs_augmented";
pub const SCORES_BASE_CSV: &str = "scores_base.csv";
pub const SCORES_AUGMENTED_CSV: &str = "scores_augmented.csv";
pub const IMPROVEMENT_CSV: &str = "improvement.csv";
pub const REPORT_JSON: &str = "report.json";
pub const STALE_MARKER: &str = "STALE";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Tessellate,
    Ingest,
    Estimate,
    Synthesize,
    Score,
    Diff,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Tessellate,
        Stage::Ingest,
        Stage::Estimate,
        Stage::Synthesize,
        Stage::Score,
        Stage::Diff,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Tessellate => "tessellate",
            Stage::Ingest => "ingest",
            Stage::Estimate => "estimate",
            Stage::Synthesize => "synthesize",
            Stage::Score => "score",
            Stage::Diff => "diff",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Stage> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown stage `{s}`")))
    }
}

pub struct Pipeline {
    pub cfg: RunConfig,
    /// Worker threads for kriging and scoring; 0 = one per core.
    pub workers: usize,
}

impl Pipeline {
    pub fn new(cfg: RunConfig, workers: usize) -> Pipeline {
        Pipeline { cfg, workers }
    }

    fn out(&self, name: &str) -> PathBuf {
        self.cfg.paths.out_dir.join(name)
    }

    /// Runs all stages in order and returns the accumulated report.
    pub fn run_all(&self) -> Result<serde_json::Value> {
        for stage in Stage::ALL {
            self.run_stage(stage)?;
        }
        let text = std::fs::read_to_string(self.out(REPORT_JSON))
            .map_err(|e| Error::io("reading run report", e))?;
        serde_json::from_str(&text).map_err(|e| Error::json("parsing run report", e))
    }

    /// Runs one stage. On failure the output directory is flagged stale
    /// with the stage name and cause; a later successful run of the same
    /// stage clears the flag.
    pub fn run_stage(&self, stage: Stage) -> Result<()> {
        std::fs::create_dir_all(&self.cfg.paths.out_dir)
            .map_err(|e| Error::io("creating output directory", e))?;
        let started = Instant::now();
        match self.dispatch(stage) {
            Ok(section) => {
                self.update_report(stage, section)?;
                let marker = self.out(STALE_MARKER);
                if let Ok(body) = std::fs::read_to_string(&marker) {
                    if body.starts_with(&format!("stage {stage}:")) {
                        let _ = std::fs::remove_file(&marker);
                    }
                }
                log::info!("stage {stage} finished in {:.2?}", started.elapsed());
                Ok(())
            }
            Err(e) => {
                let _ = std::fs::write(self.out(STALE_MARKER), format!("stage {stage}: {e}\n"));
                Err(e)
            }
        }
    }

    fn dispatch(&self, stage: Stage) -> Result<serde_json::Value> {
        match stage {
            Stage::Tessellate => self.stage_tessellate(),
            Stage::Ingest => self.stage_ingest(),
            Stage::Estimate => self.stage_estimate(),
            Stage::Synthesize => self.stage_synthesize(),
            Stage::Score => self.stage_score(),
            Stage::Diff => self.stage_diff(),
        }
    }

    fn update_report(&self, stage: Stage, section: serde_json::Value) -> Result<()> {
        let path = self.out(REPORT_JSON);
        let mut root: serde_json::Value = match std::fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text)
                .map_err(|e| Error::json("parsing existing run report", e))?,
            Err(_) => json!({}),
        };
        root[stage.name()] = section;
        let mut text = serde_json::to_string_pretty(&root)
            .map_err(|e| Error::json("writing run report", e))?;
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| Error::io("writing run report", e))
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        let mut b = rayon::ThreadPoolBuilder::new();
        if self.workers > 0 {
            b = b.num_threads(self.workers);
        }
        b.build()
            .map_err(|e| Error::InvalidParameter(format!("cannot build worker pool: {e}")))
    }

    // ------------------------------------------------------------------
    // Stage 1: tessellate

    fn stage_tessellate(&self) -> Result<serde_json::Value> {
        let p = &self.cfg.parameters;
        let people_raw = read_lon_lat_csv(&self.cfg.paths.people_csv)?;
        let hubs_raw = read_lon_lat_csv(&self.cfg.paths.hubs_csv)?;

        let bbox_raw = match p.bbox {
            Some(b) => b,
            None => {
                let all = people_raw.iter().chain(&hubs_raw);
                let mut bounds: Option<[f64; 4]> = None;
                for &(lon, lat) in all {
                    let b = bounds.get_or_insert([lon, lat, lon, lat]);
                    b[0] = b[0].min(lon);
                    b[1] = b[1].min(lat);
                    b[2] = b[2].max(lon);
                    b[3] = b[3].max(lat);
                }
                bounds.ok_or_else(|| {
                    Error::InvalidParameter(
                        "cannot infer a bounding box from empty people and hub files; set parameters.bbox"
                            .into(),
                    )
                })?
            }
        };
        let proj = if p.metric_coords {
            Projection::Identity
        } else {
            Projection::centered_on(bbox_raw[0], bbox_raw[1], bbox_raw[2], bbox_raw[3])
        };
        let pmin = proj.forward(bbox_raw[0], bbox_raw[1]);
        let pmax = proj.forward(bbox_raw[2], bbox_raw[3]);
        let grid = tessellate(pmin, pmax, p.hex_side_m)?;
        let people: Vec<Point> = people_raw
            .iter()
            .map(|&(lon, lat)| proj.forward(lon, lat))
            .collect();
        let (grid, outside) = grid.assign_opportunities(&people);

        let mut text = serde_json::to_string_pretty(&grid_to_geojson(&grid, &proj))
            .map_err(|e| Error::json("serializing grid", e))?;
        text.push('\n');
        std::fs::write(self.out(GRID_GEOJSON), text)
            .map_err(|e| Error::io("writing grid geojson", e))?;

        Ok(json!({
            "cells": grid.cells().len(),
            "people": people.len(),
            "people_outside_grid": outside,
            "total_opportunities": grid.total_opportunities(),
        }))
    }

    // ------------------------------------------------------------------
    // Stage 2: ingest

    fn stage_ingest(&self) -> Result<serde_json::Value> {
        let p = &self.cfg.parameters;
        let (grid, proj) = self.load_grid()?;
        let hubs = load_hubs(&self.cfg.paths.hubs_csv, &proj)?;
        let ingested = load_observations(
            &self.cfg.paths.observations_csv,
            &hubs,
            p.snap_radius_m,
            &proj,
        )?;
        let total_rows = ingested.observations.len() + ingested.rejects.len();

        let mut rejects = ingested.rejects;
        let mut kept: Vec<TripObservation> = Vec::new();
        for o in ingested.observations {
            if grid.locate(o.anchor()).is_ok() {
                kept.push(o);
            } else {
                rejects.push(Reject {
                    row: o.source_row,
                    reason: "outside_area".into(),
                });
            }
        }
        rejects.sort_by_key(|r| r.row);

        let mut hubs_sorted = hubs.clone();
        hubs_sorted.sort_by(|a, b| a.id.cmp(&b.id));
        let mut areas = Vec::new();
        for hub in &hubs_sorted {
            areas.push(feeder_area(hub, &kept, &grid)?);
        }

        write_csv(
            &self.out(OBSERVATIONS_CSV),
            "source_row,hub_id,direction,request_s,origin_x,origin_y,dest_x,dest_y,wait_s,travel_s",
            kept.iter().map(|o| {
                vec![
                    o.source_row.to_string(),
                    o.hub_id.clone(),
                    o.direction.to_string(),
                    o.request_s.to_string(),
                    o.origin.x.to_string(),
                    o.origin.y.to_string(),
                    o.destination.x.to_string(),
                    o.destination.y.to_string(),
                    o.wait_s.to_string(),
                    o.travel_s.to_string(),
                ]
            }),
        )?;
        write_csv(
            &self.out(REJECTS_CSV),
            "row,reason",
            rejects
                .iter()
                .map(|r| vec![r.row.to_string(), r.reason.clone()]),
        )?;
        write_csv(
            &self.out(FEEDER_AREAS_CSV),
            "hub_id,radius_m,cell_id",
            areas.iter().flat_map(|a| {
                a.cell_ids.iter().map(move |c| {
                    vec![a.hub_id.clone(), a.radius_m.to_string(), c.to_string()]
                })
            }),
        )?;

        let access = kept.iter().filter(|o| o.direction == Direction::Access).count();
        let egress = kept.len() - access;
        let mut by_reason: BTreeMap<String, usize> = BTreeMap::new();
        for r in &rejects {
            *by_reason.entry(r.reason.clone()).or_default() += 1;
        }
        let feeder_cells: BTreeMap<&str, serde_json::Value> = areas
            .iter()
            .map(|a| {
                (
                    a.hub_id.as_str(),
                    json!({"radius_m": a.radius_m, "cells": a.cell_ids.len()}),
                )
            })
            .collect();
        debug_assert_eq!(access + egress + rejects.len(), total_rows);
        Ok(json!({
            "total_rows": total_rows,
            "access": access,
            "egress": egress,
            "rejected": rejects.len(),
            "rejects_by_reason": by_reason,
            "hubs": hubs.len(),
            "feeder_areas": feeder_cells,
        }))
    }

    // ------------------------------------------------------------------
    // Stage 3: estimate

    fn stage_estimate(&self) -> Result<serde_json::Value> {
        let p = &self.cfg.parameters;
        let (grid, proj) = self.load_grid()?;
        let hubs = load_hubs(&self.cfg.paths.hubs_csv, &proj)?;
        let hub_map: BTreeMap<&str, &Hub> = hubs.iter().map(|h| (h.id.as_str(), h)).collect();
        let areas = self.load_feeder_areas()?;
        let obs = self.load_observations_artifact()?;
        let buckets = group_by_timeslot(&obs, p.slot_length_s)?;

        let params = KrigeParams {
            family: p.variogram_family,
            min_obs: p.min_obs_for_kriging,
            n_lag_bins: DEFAULT_LAG_BINS,
        };
        let work: Vec<(&TimeslotKey, &Vec<usize>)> = buckets.iter().collect();
        for (key, _) in &work {
            if !hub_map.contains_key(key.hub_id.as_str()) || !areas.contains_key(&key.hub_id) {
                return Err(Error::DanglingKey {
                    kind: "hub_id",
                    key: key.hub_id.clone(),
                });
            }
        }
        let fields: Vec<BucketField> = self.pool()?.install(|| {
            work.par_iter()
                .map(|(key, idxs)| {
                    let bucket: Vec<&TripObservation> = idxs.iter().map(|&i| &obs[i]).collect();
                    krige_field(
                        key,
                        &bucket,
                        hub_map[key.hub_id.as_str()],
                        &areas[&key.hub_id],
                        &grid,
                        &params,
                    )
                })
                .collect()
        });

        write_csv(
            &self.out(FIELD_ESTIMATES_CSV),
            "hub_id,direction,slot_start,cell_id,w_hat,y_hat,n_obs,method",
            fields.iter().flat_map(|f| {
                f.estimates.iter().map(move |e| {
                    vec![
                        f.key.hub_id.clone(),
                        f.key.direction.to_string(),
                        f.key.slot_start.to_string(),
                        e.cell_id.to_string(),
                        e.w_hat.to_string(),
                        e.y_hat.to_string(),
                        e.n_obs.to_string(),
                        e.method.to_string(),
                    ]
                })
            }),
        )?;

        for (path, pick) in [
            (self.out(DIAGNOSTICS_WAIT_CSV), 0usize),
            (self.out(DIAGNOSTICS_TRAVEL_CSV), 1usize),
        ] {
            write_csv(
                &path,
                "hub,direction,t_k,n_obs,method,nugget,sill,range,clamped_count",
                fields.iter().map(|f| {
                    let d = if pick == 0 { &f.wait } else { &f.travel };
                    let (nugget, sill, range) = match &d.model {
                        Some(m) => (
                            m.nugget.to_string(),
                            (m.nugget + m.partial_sill).to_string(),
                            m.range.to_string(),
                        ),
                        None => (String::new(), String::new(), String::new()),
                    };
                    vec![
                        f.key.hub_id.clone(),
                        f.key.direction.to_string(),
                        f.key.slot_start.to_string(),
                        f.n_obs.to_string(),
                        d.method.to_string(),
                        nugget,
                        sill,
                        range,
                        d.clamped.to_string(),
                    ]
                }),
            )?;
        }

        let vdir = self.out(VARIOGRAMS_DIR);
        if vdir.exists() {
            std::fs::remove_dir_all(&vdir)
                .map_err(|e| Error::io("clearing variograms directory", e))?;
        }
        std::fs::create_dir_all(&vdir)
            .map_err(|e| Error::io("creating variograms directory", e))?;
        for f in &fields {
            for (field_name, diag) in [("wait", &f.wait), ("travel", &f.travel)] {
                if let Some(ev) = &diag.variogram {
                    let name = format!(
                        "{}_{}_{}_{field_name}.csv",
                        sanitize(&f.key.hub_id),
                        f.key.direction,
                        f.key.slot_start
                    );
                    write_csv(
                        &vdir.join(name),
                        "lag_center,semivariance,pairs",
                        ev.bins.iter().map(|b| {
                            vec![
                                b.lag_center.to_string(),
                                b.semivariance.to_string(),
                                b.pairs.to_string(),
                            ]
                        }),
                    )?;
                }
            }
        }

        let kriged = fields
            .iter()
            .filter(|f| f.wait.method == Method::Kriging && f.travel.method == Method::Kriging)
            .count();
        let stationarity: Vec<serde_json::Value> = fields
            .iter()
            .filter_map(|f| {
                f.stationarity.as_ref().map(|s| {
                    json!({
                        "hub": f.key.hub_id,
                        "direction": f.key.direction.to_string(),
                        "slot_start": f.key.slot_start,
                        "near_mean_s": s.near_mean_s,
                        "far_mean_s": s.far_mean_s,
                    })
                })
            })
            .collect();
        Ok(json!({
            "buckets": fields.len(),
            "buckets_kriged": kriged,
            "buckets_fallback": fields.len() - kriged,
            "estimates": fields.iter().map(|f| f.estimates.len()).sum::<usize>(),
            "clamped_wait": fields.iter().map(|f| f.wait.clamped).sum::<usize>(),
            "clamped_travel": fields.iter().map(|f| f.travel.clamped).sum::<usize>(),
            "stationarity": stationarity,
        }))
    }

    // ------------------------------------------------------------------
    // Stage 4: synthesize

    fn stage_synthesize(&self) -> Result<serde_json::Value> {
        let p = &self.cfg.parameters;
        let (grid, proj) = self.load_grid()?;
        let hubs = load_hubs(&self.cfg.paths.hubs_csv, &proj)?;
        let rows = self.load_estimates()?;
        let lookup = FieldLookup::from_rows(p.slot_length_s, rows);
        let (trips, dropped) = synthesize_trips(&lookup, DEFAULT_ANCHOR_T0_S, p.min_headway_floor_s);

        let base = parse_gtfs(&self.cfg.paths.gtfs_dir, &p.service_date)?;
        let used_hubs: BTreeSet<&str> = trips.iter().map(|t| t.hub_id.as_str()).collect();
        for hub in &hubs {
            if used_hubs.contains(hub.id.as_str()) && !base.stops.contains_key(&hub.gtfs_stop_id) {
                return Err(Error::DanglingKey {
                    kind: "stop_id",
                    key: format!("{} (hub {})", hub.gtfs_stop_id, hub.id),
                });
            }
        }

        let aug_dir = self.out(GTFS_AUGMENTED_DIR);
        if aug_dir.exists() {
            std::fs::remove_dir_all(&aug_dir)
                .map_err(|e| Error::io("clearing augmented feed directory", e))?;
        }
        emit_gtfs(
            &trips,
            &grid,
            &hubs,
            &proj,
            &self.cfg.paths.gtfs_dir,
            &aug_dir,
            &p.service_date,
        )?;

        write_csv(
            &self.out(VIRTUAL_TRIPS_CSV),
            "trip_id,direction,cell_id,hub_id,depart,arrive,w_hat,y_hat",
            trips.iter().map(|t: &VirtualTrip| {
                vec![
                    t.trip_id.clone(),
                    t.direction.to_string(),
                    t.cell_id.to_string(),
                    t.hub_id.clone(),
                    t.depart_s.to_string(),
                    t.arrive_s.to_string(),
                    t.w_hat.to_string(),
                    t.y_hat.to_string(),
                ]
            }),
        )?;

        let served_cells: BTreeSet<CellId> = trips.iter().map(|t| t.cell_id).collect();
        let routes: BTreeSet<(String, Direction)> = trips
            .iter()
            .map(|t| (t.hub_id.clone(), t.direction))
            .collect();
        Ok(json!({
            "virtual_trips": trips.len(),
            "dropped_past_midnight": dropped,
            "served_cells": served_cells.len(),
            "virtual_routes": routes.len(),
            "empty_synthesis": trips.is_empty(),
        }))
    }

    // ------------------------------------------------------------------
    // Stage 5: score

    fn stage_score(&self) -> Result<serde_json::Value> {
        let p = &self.cfg.parameters;
        let (grid, proj) = self.load_grid()?;
        let aug_dir = self.out(GTFS_AUGMENTED_DIR);
        require_artifact(&aug_dir)?;
        let base = parse_gtfs(&self.cfg.paths.gtfs_dir, &p.service_date)?;
        let augmented = parse_gtfs(&aug_dir, &p.service_date)?;

        let walk = match &self.cfg.paths.walk_matrix_csv {
            Some(path) => WalkModel::Matrix {
                speed_mps: p.walk_speed_mps,
                overrides: load_walk_matrix(path)?,
            },
            None => WalkModel::Euclidean {
                speed_mps: p.walk_speed_mps,
            },
        };
        let gparams = GraphParams {
            walk,
            max_walk_s: p.max_walk_s,
            transfer_buffer_s: p.transfer_buffer_s,
        };
        let pool = self.pool()?;
        let mut periods_section = serde_json::Map::new();
        for (label, schedule, out_csv) in [
            ("base", &base, SCORES_BASE_CSV),
            ("augmented", &augmented, SCORES_AUGMENTED_CSV),
        ] {
            let graph = build_graph(schedule, &proj, &gparams);
            let mut all: Vec<(String, BTreeMap<CellId, PeriodScore>)> = Vec::new();
            for period in &p.periods {
                let scores = pool.install(|| {
                    score_period(
                        &graph,
                        &grid,
                        (period.start_s, period.end_s),
                        p.sample_step_s,
                        p.tau_s,
                        p.walk_speed_mps,
                        p.max_walk_s,
                    )
                })?;
                let score_map: BTreeMap<CellId, f64> =
                    scores.iter().map(|(&c, s)| (c, s.mean_score)).collect();
                let reach_map: BTreeMap<CellId, f64> =
                    scores.iter().map(|(&c, s)| (c, s.mean_reachable)).collect();
                write_cells_geojson(
                    &self.out(&format!("scores_{label}_{}.geojson", period.name)),
                    &grid,
                    &proj,
                    &[("score", &score_map), ("reachable_cells", &reach_map)],
                )?;
                all.push((period.name.clone(), scores));
            }
            write_csv(
                &self.out(out_csv),
                "cell_id,period,score,reachable_cells",
                all.iter().flat_map(|(name, scores)| {
                    scores.iter().map(move |(c, s)| {
                        vec![
                            c.to_string(),
                            name.clone(),
                            s.mean_score.to_string(),
                            s.mean_reachable.to_string(),
                        ]
                    })
                }),
            )?;
            if label == "base" {
                for (name, _) in &all {
                    let period = p.periods.iter().find(|pp| &pp.name == name).unwrap();
                    periods_section.insert(
                        name.clone(),
                        json!({
                            "start_s": period.start_s,
                            "end_s": period.end_s,
                            "samples": (period.end_s - period.start_s) / p.sample_step_s,
                        }),
                    );
                }
            }
        }
        Ok(json!({
            "cells": grid.cells().len(),
            "periods": periods_section,
            "tau_s": p.tau_s,
        }))
    }

    // ------------------------------------------------------------------
    // Stage 6: diff

    fn stage_diff(&self) -> Result<serde_json::Value> {
        let (grid, proj) = self.load_grid()?;
        let base = self.load_scores(&self.out(SCORES_BASE_CSV))?;
        let augmented = self.load_scores(&self.out(SCORES_AUGMENTED_CSV))?;
        if !base.keys().eq(augmented.keys()) {
            return Err(Error::InvalidParameter(
                "base and augmented score files cover different periods".into(),
            ));
        }

        let mut rows = Vec::new();
        let mut section = serde_json::Map::new();
        for (period, base_scores) in &base {
            let deltas = improvement(base_scores, &augmented[period])?;
            write_cells_geojson(
                &self.out(&format!("improvement_{period}.geojson")),
                &grid,
                &proj,
                &[("delta", &deltas)],
            )?;
            let improved = deltas.values().filter(|&&d| d > 0.0).count();
            let max = deltas.values().cloned().fold(0.0f64, f64::max);
            let mean = if deltas.is_empty() {
                0.0
            } else {
                deltas.values().sum::<f64>() / deltas.len() as f64
            };
            section.insert(
                period.clone(),
                json!({"cells_improved": improved, "max_delta": max, "mean_delta": mean}),
            );
            for (c, d) in &deltas {
                rows.push(vec![c.to_string(), period.clone(), d.to_string()]);
            }
        }
        write_csv(&self.out(IMPROVEMENT_CSV), "cell_id,period,delta", rows.into_iter())?;
        Ok(json!({"cells": grid.cells().len(), "periods": section}))
    }

    // ------------------------------------------------------------------
    // Artifact loading

    fn load_grid(&self) -> Result<(Grid, Projection)> {
        let path = self.out(GRID_GEOJSON);
        require_artifact(&path)?;
        let text = std::fs::read_to_string(&path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| Error::json(format!("parsing {}", path.display()), e))?;
        grid_from_geojson(&value)
    }

    fn load_observations_artifact(&self) -> Result<Vec<TripObservation>> {
        let path = self.out(OBSERVATIONS_CSV);
        require_artifact(&path)?;
        let mut rdr = csv_reader(&path)?;
        let mut out = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::csv(format!("reading {}", path.display()), e))?;
            let fail = |msg: String| Error::Format {
                path: path.clone(),
                message: format!("row {}: {msg}", i + 2),
            };
            let f = |k: usize| rec.get(k).unwrap_or("").trim();
            out.push(TripObservation {
                source_row: f(0).parse().map_err(|_| fail("bad source_row".into()))?,
                hub_id: f(1).to_string(),
                direction: f(2).parse()?,
                request_s: f(3).parse().map_err(|_| fail("bad request_s".into()))?,
                origin: Point::new(
                    f(4).parse().map_err(|_| fail("bad origin_x".into()))?,
                    f(5).parse().map_err(|_| fail("bad origin_y".into()))?,
                ),
                destination: Point::new(
                    f(6).parse().map_err(|_| fail("bad dest_x".into()))?,
                    f(7).parse().map_err(|_| fail("bad dest_y".into()))?,
                ),
                wait_s: f(8).parse().map_err(|_| fail("bad wait_s".into()))?,
                travel_s: f(9).parse().map_err(|_| fail("bad travel_s".into()))?,
            });
        }
        Ok(out)
    }

    fn load_feeder_areas(&self) -> Result<BTreeMap<String, FeederArea>> {
        let path = self.out(FEEDER_AREAS_CSV);
        require_artifact(&path)?;
        let mut rdr = csv_reader(&path)?;
        let mut areas: BTreeMap<String, FeederArea> = BTreeMap::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::csv(format!("reading {}", path.display()), e))?;
            let fail = |msg: &str| Error::Format {
                path: path.clone(),
                message: format!("row {}: {msg}", i + 2),
            };
            let hub_id = rec.get(0).unwrap_or("").trim().to_string();
            let radius: f64 = rec
                .get(1)
                .unwrap_or("")
                .trim()
                .parse()
                .map_err(|_| fail("bad radius_m"))?;
            let cell = CellId(
                rec.get(2)
                    .unwrap_or("")
                    .trim()
                    .parse()
                    .map_err(|_| fail("bad cell_id"))?,
            );
            let area = areas.entry(hub_id.clone()).or_insert_with(|| FeederArea {
                hub_id,
                radius_m: radius,
                cell_ids: BTreeSet::new(),
            });
            area.cell_ids.insert(cell);
        }
        Ok(areas)
    }

    fn load_estimates(&self) -> Result<Vec<EstimateRow>> {
        let path = self.out(FIELD_ESTIMATES_CSV);
        require_artifact(&path)?;
        let mut rdr = csv_reader(&path)?;
        let mut out = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::csv(format!("reading {}", path.display()), e))?;
            let fail = |msg: &str| Error::Format {
                path: path.clone(),
                message: format!("row {}: {msg}", i + 2),
            };
            let f = |k: usize| rec.get(k).unwrap_or("").trim();
            out.push(EstimateRow {
                hub_id: f(0).to_string(),
                direction: f(1).parse()?,
                slot_start: f(2).parse().map_err(|_| fail("bad slot_start"))?,
                cell_id: CellId(f(3).parse().map_err(|_| fail("bad cell_id"))?),
                w_hat: f(4).parse().map_err(|_| fail("bad w_hat"))?,
                y_hat: f(5).parse().map_err(|_| fail("bad y_hat"))?,
                method: f(7).parse()?,
            });
        }
        Ok(out)
    }

    fn load_scores(&self, path: &Path) -> Result<BTreeMap<String, BTreeMap<CellId, PeriodScore>>> {
        require_artifact(path)?;
        let mut rdr = csv_reader(path)?;
        let mut out: BTreeMap<String, BTreeMap<CellId, PeriodScore>> = BTreeMap::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::csv(format!("reading {}", path.display()), e))?;
            let fail = |msg: &str| Error::Format {
                path: path.to_path_buf(),
                message: format!("row {}: {msg}", i + 2),
            };
            let cell = CellId(
                rec.get(0)
                    .unwrap_or("")
                    .trim()
                    .parse()
                    .map_err(|_| fail("bad cell_id"))?,
            );
            let period = rec.get(1).unwrap_or("").trim().to_string();
            let score: f64 = rec
                .get(2)
                .unwrap_or("")
                .trim()
                .parse()
                .map_err(|_| fail("bad score"))?;
            let reachable: f64 = rec
                .get(3)
                .unwrap_or("")
                .trim()
                .parse()
                .map_err(|_| fail("bad reachable_cells"))?;
            out.entry(period).or_default().insert(
                cell,
                PeriodScore {
                    mean_score: score,
                    mean_reachable: reachable,
                },
            );
        }
        Ok(out)
    }
}

fn require_artifact(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact(path.to_path_buf()))
    }
}

fn csv_reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    csv::Reader::from_path(path).map_err(|e| Error::csv(format!("reading {}", path.display()), e))
}

/// Reads `lon,lat` columns from a CSV, ignoring any other columns.
fn read_lon_lat_csv(path: &Path) -> Result<Vec<(f64, f64)>> {
    let mut rdr = csv_reader(path)?;
    let headers = rdr
        .headers()
        .map_err(|e| Error::csv(format!("reading {}", path.display()), e))?
        .clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::MissingColumn {
                path: path.to_path_buf(),
                column: name.to_string(),
            })
    };
    let (c_lon, c_lat) = (col("lon")?, col("lat")?);
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::csv(format!("reading {}", path.display()), e))?;
        let get = |k: usize, what: &str| -> Result<f64> {
            rec.get(k)
                .unwrap_or("")
                .trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Format {
                    path: path.to_path_buf(),
                    message: format!("row {}: bad {what}", i + 2),
                })
        };
        out.push((get(c_lon, "lon")?, get(c_lat, "lat")?));
    }
    Ok(out)
}

/// Writes a CSV with one fixed header line. Fields containing commas,
/// quotes or newlines are quoted.
fn write_csv(
    path: &Path,
    header: &str,
    rows: impl Iterator<Item = Vec<String>>,
) -> Result<()> {
    let mut text = String::with_capacity(4096);
    text.push_str(header);
    text.push('\n');
    for row in rows {
        let mut first = true;
        for field in row {
            if !first {
                text.push(',');
            }
            first = false;
            if field.contains(',') || field.contains('"') || field.contains('\n') {
                text.push('"');
                text.push_str(&field.replace('"', "\"\""));
                text.push('"');
            } else {
                text.push_str(&field);
            }
        }
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '-'
            }
        })
        .collect()
}

/// GeoJSON choropleth: one polygon per cell with the given numeric
/// properties.
fn write_cells_geojson(
    path: &Path,
    grid: &Grid,
    proj: &Projection,
    props: &[(&str, &BTreeMap<CellId, f64>)],
) -> Result<()> {
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
            let mut properties = serde_json::Map::new();
            properties.insert("cell_id".into(), json!(cell.id.0));
            for (name, values) in props {
                if let Some(v) = values.get(&cell.id) {
                    properties.insert((*name).into(), json!(v));
                }
            }
            json!({
                "type": "Feature",
                "geometry": {"type": "Polygon", "coordinates": [ring]},
                "properties": properties,
            })
        })
        .collect();
    let mut text = serde_json::to_string_pretty(&json!({
        "type": "FeatureCollection",
        "features": features,
    }))
    .map_err(|e| Error::json(format!("writing {}", path.display()), e))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}
