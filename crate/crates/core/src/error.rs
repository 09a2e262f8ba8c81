//! Error type shared across the crate.
//!
//! Variants are grouped by how a front end should report them: configuration
//! problems (bad resolutions, mismatched grids, invalid thresholds), numeric
//! failures (non-finite losses), and I/O or format problems.

use crate::boxgeom::GridSpec;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("enclosing union of an empty box set is undefined")]
    EmptyUnion,

    #[error("resolution {0}px is not a multiple of 32")]
    UnsupportedResolution(u32),

    #[error("grid mismatch: expected {expected:?}, got {got:?}")]
    GridMismatch { expected: GridSpec, got: GridSpec },

    #[error("detector returned a {got:?} grid, stage contract requires {expected:?}")]
    GridContract { expected: GridSpec, got: GridSpec },

    #[error("region has zero area")]
    ZeroAreaRegion,

    #[error("offset targets were not resolved before computing the offset loss")]
    UnresolvedOffsets,

    #[error("validation set is empty")]
    EmptyValidationSet,

    #[error("non-finite loss at stage {stage}, epoch {epoch}")]
    NonFiniteLoss { stage: usize, epoch: usize },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("format error: {0}")]
    Format(String),
}
