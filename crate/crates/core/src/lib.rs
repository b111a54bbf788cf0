//! Core library for turning observed demand-responsive feeder trips into
//! schedule-like virtual transit and measuring the accessibility change.
//!
//! The pipeline: tessellate the study area into hexagonal cells, ingest
//! observed feeder trips around transit hubs, krige per-hub wait and
//! travel time fields over the cells, synthesize virtual timetables from
//! those fields, splice them into the conventional schedule, and score
//! earliest-arrival accessibility on the combined time-expanded graph.

pub mod accessibility;
pub mod config;
pub mod error;
pub mod geom;
pub mod geostat;
pub mod gtfs;
pub mod ingest;
pub mod pipeline;
pub mod synth;
pub mod tessellation;
pub mod transit_graph;

pub use error::{Error, Result};
pub use geom::{Point, Projection, EARTH_RADIUS_M};
pub use ingest::{Direction, FeederArea, Hub, TimeslotKey, TripObservation};
pub use tessellation::{grid_from_geojson, grid_to_geojson, tessellate, Cell, CellId, Grid};
