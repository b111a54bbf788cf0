//! Run configuration: a TOML file with a `[paths]` table and a
//! `[parameters]` table. Every parameter has a default matching the
//! reference scenario, so a minimal config only names the inputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geostat::{VariogramFamily, DEFAULT_MIN_OBS_FOR_KRIGING};
use crate::ingest::{DEFAULT_SLOT_LENGTH_S, DEFAULT_SNAP_RADIUS_M};
use crate::synth::DEFAULT_MIN_HEADWAY_FLOOR_S;
use crate::transit_graph::{DEFAULT_MAX_WALK_S, DEFAULT_WALK_SPEED_MPS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunPaths {
    pub gtfs_dir: PathBuf,
    pub observations_csv: PathBuf,
    pub hubs_csv: PathBuf,
    pub people_csv: PathBuf,
    pub out_dir: PathBuf,
    /// Optional stop-to-stop walk-time matrix overriding straight-line
    /// walks between listed stop pairs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub walk_matrix_csv: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Period {
    pub name: String,
    pub start_s: u32,
    pub end_s: u32,
}

fn default_periods() -> Vec<Period> {
    vec![
        Period {
            name: "morning".into(),
            start_s: crate::accessibility::MORNING_PEAK.0,
            end_s: crate::accessibility::MORNING_PEAK.1,
        },
        Period {
            name: "evening".into(),
            start_s: crate::accessibility::EVENING_PEAK.0,
            end_s: crate::accessibility::EVENING_PEAK.1,
        },
    ]
}

fn default_hex_side() -> f64 {
    1000.0
}
fn default_tau() -> u32 {
    crate::accessibility::DEFAULT_TAU_S
}
fn default_slot_length() -> u32 {
    DEFAULT_SLOT_LENGTH_S
}
fn default_walk_speed() -> f64 {
    DEFAULT_WALK_SPEED_MPS
}
fn default_max_walk() -> f64 {
    DEFAULT_MAX_WALK_S
}
fn default_headway_floor() -> f64 {
    DEFAULT_MIN_HEADWAY_FLOOR_S
}
fn default_min_obs() -> usize {
    DEFAULT_MIN_OBS_FOR_KRIGING
}
fn default_family() -> VariogramFamily {
    VariogramFamily::Spherical
}
fn default_snap_radius() -> f64 {
    DEFAULT_SNAP_RADIUS_M
}
fn default_sample_step() -> u32 {
    crate::accessibility::DEFAULT_SAMPLE_STEP_S
}
fn default_service_date() -> String {
    "20240115".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunParameters {
    #[serde(default = "default_hex_side")]
    pub hex_side_m: f64,
    #[serde(default = "default_tau")]
    pub tau_s: u32,
    #[serde(default = "default_slot_length")]
    pub slot_length_s: u32,
    #[serde(default = "default_walk_speed")]
    pub walk_speed_mps: f64,
    #[serde(default = "default_max_walk")]
    pub max_walk_s: f64,
    #[serde(default = "default_headway_floor")]
    pub min_headway_floor_s: f64,
    #[serde(default = "default_min_obs")]
    pub min_obs_for_kriging: usize,
    #[serde(default = "default_family")]
    pub variogram_family: VariogramFamily,
    #[serde(default = "default_snap_radius")]
    pub snap_radius_m: f64,
    #[serde(default = "default_periods")]
    pub periods: Vec<Period>,
    #[serde(default = "default_sample_step")]
    pub sample_step_s: u32,
    /// Service day the schedules are filtered to, `YYYYMMDD`.
    #[serde(default = "default_service_date")]
    pub service_date: String,
    /// Seconds a transfer needs on top of the walk.
    #[serde(default)]
    pub transfer_buffer_s: f64,
    /// Input coordinates are already planar meters (skip the geographic
    /// projection). Useful for synthetic fixtures.
    #[serde(default)]
    pub metric_coords: bool,
    /// Tessellation bounds `[min_x, min_y, max_x, max_y]` in input
    /// coordinates; inferred from people and hubs when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<[f64; 4]>,
}

impl Default for RunParameters {
    fn default() -> Self {
        toml::from_str("").expect("all parameters have defaults")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub paths: RunPaths,
    #[serde(default)]
    pub parameters: RunParameters,
}

impl RunConfig {
    /// Parses a config file; relative paths are resolved against the
    /// config file's directory.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
        let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut cfg.paths.gtfs_dir,
            &mut cfg.paths.observations_csv,
            &mut cfg.paths.hubs_csv,
            &mut cfg.paths.people_csv,
            &mut cfg.paths.out_dir,
        ] {
            if p.is_relative() {
                *p = base.join(&p);
            }
        }
        if let Some(m) = &mut cfg.paths.walk_matrix_csv {
            if m.is_relative() {
                *m = base.join(&m);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.parameters;
        let positive = [
            ("hex_side_m", p.hex_side_m),
            ("walk_speed_mps", p.walk_speed_mps),
            ("max_walk_s", p.max_walk_s),
            ("min_headway_floor_s", p.min_headway_floor_s),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        if p.snap_radius_m < 0.0 || !p.snap_radius_m.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "snap_radius_m must be non-negative, got {}",
                p.snap_radius_m
            )));
        }
        if p.transfer_buffer_s < 0.0 || !p.transfer_buffer_s.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "transfer_buffer_s must be non-negative, got {}",
                p.transfer_buffer_s
            )));
        }
        if p.tau_s == 0 {
            return Err(Error::InvalidParameter("tau_s must be positive".into()));
        }
        if p.slot_length_s == 0 || 86_400 % p.slot_length_s != 0 {
            return Err(Error::InvalidParameter(format!(
                "slot_length_s {} must divide 86400",
                p.slot_length_s
            )));
        }
        if p.min_obs_for_kriging < 2 {
            return Err(Error::InvalidParameter(
                "min_obs_for_kriging must be at least 2".into(),
            ));
        }
        if p.sample_step_s == 0 {
            return Err(Error::InvalidParameter("sample_step_s must be positive".into()));
        }
        if p.periods.is_empty() {
            return Err(Error::InvalidParameter("at least one period is required".into()));
        }
        let mut sorted: Vec<&Period> = p.periods.iter().collect();
        sorted.sort_by_key(|pp| pp.start_s);
        let mut names = std::collections::BTreeSet::new();
        for (i, period) in sorted.iter().enumerate() {
            if period.name.is_empty() || !names.insert(period.name.clone()) {
                return Err(Error::InvalidParameter(format!(
                    "period names must be unique and non-empty, got `{}`",
                    period.name
                )));
            }
            if period.end_s <= period.start_s || period.end_s > 86_400 {
                return Err(Error::InvalidParameter(format!(
                    "period `{}` [{}, {}[ must be non-empty within the day",
                    period.name, period.start_s, period.end_s
                )));
            }
            if (period.end_s - period.start_s) % p.sample_step_s != 0 {
                return Err(Error::InvalidParameter(format!(
                    "sample_step_s {} must divide the length of period `{}`",
                    p.sample_step_s, period.name
                )));
            }
            if i > 0 && period.start_s < sorted[i - 1].end_s {
                return Err(Error::InvalidParameter(format!(
                    "periods `{}` and `{}` overlap",
                    sorted[i - 1].name, period.name
                )));
            }
        }
        if p.service_date.len() != 8 || !p.service_date.bytes().all(|b| b.is_ascii_digit()) {
            return Err(Error::InvalidParameter(format!(
                "service_date must be YYYYMMDD, got `{}`",
                p.service_date
            )));
        }
        if let Some([min_x, min_y, max_x, max_y]) = p.bbox {
            if !(max_x > min_x && max_y > min_y) {
                return Err(Error::InvalidParameter(
                    "bbox must be [min_x, min_y, max_x, max_y] with positive extent".into(),
                ));
            }
        }
        Ok(())
    }
}
