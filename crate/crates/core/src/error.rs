use thiserror::Error;

use crate::model::weights::WeightError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The proposal does not cover a single heatmap pixel.
    #[error("proposal window does not intersect the heatmap")]
    EmptyWindow,

    #[error("proposal has zero {0}")]
    ZeroExtent(&'static str),

    #[error("degenerate keypoint configuration: {0}")]
    DegenerateKeypoints(String),

    #[error("fit diverged: loss increased for {consecutive} consecutive steps (at step {step})")]
    Diverged { step: usize, consecutive: usize },

    #[error("unknown {kind} {name:?}; available: {available}")]
    UnknownStrategy {
        kind: &'static str,
        name: String,
        available: String,
    },

    #[error(transparent)]
    Weights(#[from] WeightError),
}
