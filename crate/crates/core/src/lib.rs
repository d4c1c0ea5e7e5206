pub mod align;
pub mod config;
pub mod error;
pub mod geometry;
pub mod ingest;
pub mod metrics;
pub mod morphology;
pub mod nav;
pub mod pipeline;
pub mod plane;
pub mod semantics;
pub mod service;
pub mod spatial;
pub mod synth;

pub use config::PipelineConfig;
pub use error::{Error, Result};
