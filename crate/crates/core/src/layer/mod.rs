//! Linear layers: plain dense, the basis-expansion layer used during
//! compression, and the two-layer form it finalizes into.

mod dense;
mod factorized;

pub use dense::{DenseGradients, DenseLinear, LowRankPair, PairGradients};
pub use factorized::{select_by_mass, Batch, FactorizedLinear, LayerGradients, PruneOutcome};

use thiserror::Error;

use crate::linalg::LinalgError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LayerError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("keep ratio per pruning must lie in (0, 1], got {0}")]
    KeepRatio(f64),
    #[error("cannot prune a layer with no bases")]
    EmptyLayer,
}
