use thiserror::Error;

pub type Result<T, E = LabError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("t = {t} outside schedule clamp [{t_min}, {t_max}]")]
    Domain { t: f64, t_min: f64, t_max: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid target: {0}")]
    InvalidTarget(String),

    #[error("shape mismatch: expected length {expected}, found {found}")]
    Shape { expected: usize, found: usize },

    #[error("degenerate normal direction: |n| = {norm:e} <= {threshold:e}")]
    DegenerateNormal { norm: f64, threshold: f64 },

    #[error("capability: {0}")]
    Capability(String),

    #[error("non-finite field output at probe {probe}")]
    Estimation { probe: usize },

    #[error("non-finite state after step {last_valid_step}")]
    Integration { last_valid_step: usize },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub(crate) fn check_len(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(LabError::Shape { expected, found })
    }
}
