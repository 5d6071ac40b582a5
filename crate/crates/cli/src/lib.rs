//! Configuration-driven experiments on the radial Kähler–Ricci flow.

pub mod config;
pub mod presets;
pub mod runner;

pub use config::{CheckSpec, ExperimentConfig, InitialData};
pub use runner::{run, Manifest, RunSummary, FAILED_MARKER};
