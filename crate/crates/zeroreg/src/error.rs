//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("fit diverged at iteration {iteration}: loss is not finite")]
    FitFailure { iteration: usize },

    #[error("optimization failed at step {step} (batch seed {seed}): non-finite state")]
    OptimizationFailure { step: usize, seed: u64 },

    #[error("no correspondences within distance cap at ICP iteration {iteration}")]
    NoOverlap { iteration: usize },

    #[error("degenerate correspondences: covariance rank below 2")]
    DegenerateCorrespondences,

    #[error("point cloud extraction produced no points (field is transparent)")]
    EmptyCloud,

    #[error("scene generation failed for seed {seed}: {reason}")]
    GenerationFailure { seed: u64, reason: String },

    #[error("malformed {format} data: {detail}")]
    Format { format: &'static str, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn format(format: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            format,
            detail: detail.into(),
        }
    }
}
