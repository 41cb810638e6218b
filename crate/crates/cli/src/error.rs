use std::path::PathBuf;

use serde::Serialize;
use thiserror::Error;

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),

    #[error("stage `{stage}` needs {}; run `probe {run_first}` first", path.display())]
    MissingUpstream {
        stage: &'static str,
        run_first: String,
        path: PathBuf,
    },

    #[error("stage `{stage}`: the outputs of `{run_first}` are out of date; run `probe {run_first}` first")]
    StaleUpstream { stage: &'static str, run_first: String },

    #[error("stage `{stage}`: {source}")]
    Core {
        stage: &'static str,
        #[source]
        source: probe_core::Error,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// The JSON object printed on stderr when a command fails.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, serde::Deserialize)]
pub struct ErrorReport {
    pub error: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_first: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    pub message: String,
}

impl PipelineError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PipelineError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn report(&self) -> ErrorReport {
        let mut report = ErrorReport {
            error: String::new(),
            stage: None,
            run_first: None,
            path: None,
            message: self.to_string(),
        };
        match self {
            PipelineError::Config(_) => report.error = "config".into(),
            PipelineError::MissingUpstream { stage, run_first, path } => {
                report.error = "missing_upstream".into();
                report.stage = Some(stage.to_string());
                report.run_first = Some(run_first.clone());
                report.path = Some(path.display().to_string());
            }
            PipelineError::StaleUpstream { stage, run_first } => {
                report.error = "stale_upstream".into();
                report.stage = Some(stage.to_string());
                report.run_first = Some(run_first.clone());
            }
            PipelineError::Core { stage, .. } => {
                report.error = "stage_failed".into();
                report.stage = Some(stage.to_string());
            }
            PipelineError::Io { path, .. } => {
                report.error = "io".into();
                report.path = Some(path.display().to_string());
            }
        }
        report
    }
}

/// Attaches the stage name to core errors.
pub(crate) trait InStage<T> {
    fn in_stage(self, stage: &'static str) -> Result<T>;
}

impl<T> InStage<T> for probe_core::Result<T> {
    fn in_stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|source| PipelineError::Core { stage, source })
    }
}
