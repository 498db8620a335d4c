//! Datasets, runs, sweeps and reports around the htdc engine. The `htdc`
//! binary is a thin wrapper over this library.

pub mod config;
pub mod dataset;
pub mod error;
pub mod gen;
pub mod metrics;
pub mod report;
pub mod runner;
pub mod sweep;

pub use config::{Decoder, HarnessConfig};
pub use dataset::{load_dataset, BackendSpec, ScenarioRef, TaskInstance};
pub use error::{HarnessError, Result};
pub use gen::{generate, Family, Recipe};
pub use runner::{run, InstanceResult, RunReport};
pub use sweep::{sweep, SweepAxis, SweepReport};
