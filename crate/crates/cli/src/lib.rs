//! Stage runner for the probing pipeline: configuration, stages, and the
//! synthetic benchmark tooling behind `probe synth`.

pub mod config;
mod error;
pub mod pipeline;
pub mod synth;

pub use config::PipelineConfig;
pub use error::{ErrorReport, PipelineError, Result};
pub use pipeline::{Pipeline, Stage, StageOutcome, StageStatus};
