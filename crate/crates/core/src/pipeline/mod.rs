//! Run configuration, manifests and the end-to-end stages.

pub mod commands;
pub mod config;
pub mod manifest;
pub mod stages;

pub use config::{EvalConfig, RunConfig};
pub use manifest::{sha256_file, RunManifest};
pub use stages::Query;
