//! Intentionally empty; this crate only hosts benchmarks.
