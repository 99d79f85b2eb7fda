use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite state encountered in {0}")]
    NonFinite(&'static str),

    #[error("Riccati recursion did not converge after {iterations} iterations (last change {last_change:e})")]
    RiccatiNoConvergence { iterations: usize, last_change: f64 },

    #[error("insufficient data: need at least {needed} samples, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("rank deficient data (insufficient excitation); singular values: {singular_values:?}")]
    RankDeficient { singular_values: Vec<f64> },

    #[error("requested order {order} exceeds numerical rank {rank}; singular values: {singular_values:?}")]
    OrderExceedsRank {
        order: usize,
        rank: usize,
        singular_values: Vec<f64>,
    },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("latent state diverged at step {step} (|z| = {norm:e})")]
    Divergence { step: usize, norm: f64 },

    #[error("degenerate point cloud: {0}")]
    DegeneratePoints(String),

    #[error("detector alarm during data collection at t = {t} s (|r| = {residual:e})")]
    AlarmDuringCollection { t: f64, residual: f64 },

    #[error("empty data log")]
    EmptyLog,

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config error: {0}")]
    Config(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
