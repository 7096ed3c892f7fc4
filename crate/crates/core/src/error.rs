use thiserror::Error;

/// Errors surfaced by model evaluation, fitting, and data handling.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error in {op}: {msg}")]
    Domain { op: &'static str, msg: String },

    #[error("degenerate emission at {context}: count {y} has zero probability under every state")]
    DegenerateEmission { context: String, y: u64 },

    #[error("state {state} starved: total posterior weight {weight:.3e} below 1e-8{}",
            iteration.map(|i| format!(" at EM iteration {i}")).unwrap_or_default())]
    StateStarvation {
        state: usize,
        weight: f64,
        iteration: Option<usize>,
    },

    #[error("singular design: {detail}")]
    SingularDesign { detail: String },

    #[error("singular information matrix; null-space direction approximately {direction:?}")]
    SingularInformation { direction: Vec<f64> },

    #[error("{what} failed to converge after {iterations} iterations (gradient norm {grad_norm:.3e}; trace: {trace:?})")]
    NonConvergence {
        what: &'static str,
        iterations: usize,
        grad_norm: f64,
        trace: Vec<f64>,
    },

    #[error("degenerate mixture: component means collapsed to {mu:.6} (difference below 1e-6)")]
    DegenerateMixture { mu: f64 },

    #[error("covariance diagonal entry {index} is negative ({value:.3e}); fit is not at an optimum")]
    NonOptimum { index: usize, value: f64 },

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("schema violation at row {row}: {msg}")]
    Schema { row: usize, msg: String },

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error on {path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },

    #[error("json error on {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;
