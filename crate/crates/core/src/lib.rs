//! Discrete-event simulator for idle waves and computational wavefronts in
//! bulk-synchronous MPI programs on multicore clusters.
//!
//! A run is described by a [`SimConfig`], resolved into an [`Experiment`],
//! and simulated by [`engine::run`] into a [`Trace`]. The [`analysis`]
//! module extracts wave observables from traces; [`export`] and [`render`]
//! write them to disk.

pub mod analysis;
pub mod config;
pub mod engine;
pub mod export;
pub mod model;
pub mod mpi;
pub mod perturbation;
pub mod presets;
pub mod render;
pub mod trace;

pub use config::{load_config, ConfigError, Experiment, SimConfig};
pub use engine::{run, RunLog, SimError, Simulation};
pub use model::{BandwidthCurve, Boundary, CommPattern, ModelError};
pub use trace::{Interval, IntervalKind, Trace};
