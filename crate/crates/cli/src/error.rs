use std::path::PathBuf;

use thiserror::Error;

/// Failures of the scenario runner, each mapped to a process exit code.
#[derive(Debug, Error)]
pub enum LabError {
    /// A core routine failed inside the named stage.
    #[error("[{stage}] {source}")]
    Core {
        stage: &'static str,
        #[source]
        source: soliton_core::Error,
    },

    /// Malformed or inconsistent scenario input.
    #[error("[scenario] {0}")]
    Scenario(String),

    #[error("[io] {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Manifest checksum or inventory mismatch found by `verify`.
    #[error("[verify] {0}")]
    Mismatch(String),

    /// Every sweep point failed; carries the first point's exit code.
    #[error("[sweep] all {count} points failed; first: {first}")]
    SweepFailed { count: usize, first: String, code: i32 },
}

pub type LabResult<T> = Result<T, LabError>;

impl LabError {
    pub fn core(stage: &'static str) -> impl FnOnce(soliton_core::Error) -> LabError {
        move |source| LabError::Core { stage, source }
    }

    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> LabError {
        let path = path.into();
        move |source| LabError::Io { path, source }
    }

    /// 1 verify mismatch, 2 invalid model or scenario, 3 solver failure, 4 I/O failure.
    pub fn exit_code(&self) -> i32 {
        use soliton_core::Error as E;
        match self {
            LabError::Core { source, .. } => match source {
                E::InvalidModel { .. } | E::ModelRejected(_) | E::InvalidGrid(_) | E::InvalidConfig(_) => 2,
                E::Io(_) | E::Format(_) => 4,
                _ => 3,
            },
            LabError::Scenario(_) => 2,
            LabError::Io { .. } => 4,
            LabError::Mismatch(_) => 1,
            LabError::SweepFailed { code, .. } => *code,
        }
    }
}
