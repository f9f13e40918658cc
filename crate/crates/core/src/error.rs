use thiserror::Error;

pub type Result<T, E = LabError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("softmax row {row} has every entry masked")]
    DegenerateRow { row: usize },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("gain undefined at omega={omega}: input amplitude {amplitude:e} below threshold")]
    UndefinedGain { omega: f64, amplitude: f64 },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("task generation failed: {0}")]
    Generation(String),
    #[error("run diverged at step {step}: loss={loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("no transition: max slope {max_slope:e} below threshold")]
    NoTransition { max_slope: f64 },
    #[error("sweep failed: {failed} of {total} cells diverged or errored")]
    SweepFailed { failed: usize, total: usize },
    #[error("no input: {0}")]
    NoInput(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("serialization error: {0}")]
    Serde(String),
}

impl LabError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        LabError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Short stable label used when failures are recorded as data.
    pub fn class(&self) -> &'static str {
        match self {
            LabError::Dimension(_) => "dimension",
            LabError::Index(_) => "index",
            LabError::Contract(_) => "contract",
            LabError::NonFinite(_) => "non_finite",
            LabError::DegenerateRow { .. } => "degenerate_row",
            LabError::Degenerate(_) => "degenerate",
            LabError::UndefinedGain { .. } => "undefined_gain",
            LabError::Domain(_) => "domain",
            LabError::Config(_) => "config",
            LabError::Generation(_) => "generation",
            LabError::Diverged { .. } => "diverged",
            LabError::NoTransition { .. } => "no_transition",
            LabError::SweepFailed { .. } => "sweep_failed",
            LabError::NoInput(_) => "no_input",
            LabError::Io { .. } => "io",
            LabError::Serde(_) => "serde",
        }
    }
}

impl From<serde_json::Error> for LabError {
    fn from(e: serde_json::Error) -> Self {
        LabError::Serde(e.to_string())
    }
}
