use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, LcxError>;

#[derive(Debug, Error)]
pub enum LcxError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("value out of range for `{field}`: {value} (expected {expected})")]
    Range {
        field: &'static str,
        value: f64,
        expected: &'static str,
    },

    #[error("config error at {path}: {message}")]
    Config { path: String, message: String },

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),

    #[error("conditioning error: need at least {required} samples, got {got}")]
    Conditioning { required: usize, got: usize },

    #[error("logistic fit did not converge after {iterations} iterations (gradient norm {grad_norm:e}, loss {loss})")]
    Convergence {
        iterations: usize,
        grad_norm: f64,
        loss: f64,
    },

    #[error("training failure at step {step}: {reason}")]
    TrainingFailure {
        step: usize,
        reason: String,
        last_checkpoint: Option<PathBuf>,
    },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("unknown layer `{0}`")]
    LayerLookup(String),

    #[error("stage `{stage}` depends on `{missing}`, which has not been run")]
    Dependency { stage: String, missing: String },

    #[error("stale artifact for stage `{0}`: upstream digest changed (rerun with --force)")]
    StaleArtifact(String),

    #[error("digest mismatch in {0}")]
    Digest(String),

    #[error("unsupported format version {found} (supported: {supported})")]
    Version { found: u32, supported: u32 },

    #[error("output directory is locked by another run: {0}")]
    Locked(PathBuf),

    #[error("image error: {0}")]
    Image(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl LcxError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LcxError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        LcxError::Shape(msg.into())
    }

    /// Process exit code for the CLI: 2 config, 3 dependency, 4 training.
    pub fn exit_code(&self) -> i32 {
        match self {
            LcxError::Config { .. } | LcxError::Json(_) | LcxError::Range { .. } => 2,
            LcxError::Dependency { .. } | LcxError::StaleArtifact(_) => 3,
            LcxError::TrainingFailure { .. }
            | LcxError::Convergence { .. }
            | LcxError::DegenerateData(_)
            | LcxError::DegenerateLabels(_)
            | LcxError::Conditioning { .. } => 4,
            _ => 1,
        }
    }
}
