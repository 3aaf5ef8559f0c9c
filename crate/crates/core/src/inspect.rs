//! De-embedding of layer bases: project each output basis vector `u_i`
//! through the model's output head and list the highest-scoring tokens.

use thiserror::Error;

use crate::layer::FactorizedLinear;
use crate::linalg::{LinalgError, Matrix};
use crate::model::{Layer, ToyModel};

#[derive(Debug, Error)]
pub enum InspectError {
    #[error("unknown layer {name:?}; known layers: {known}")]
    UnknownLayer { name: String, known: String },
    #[error("de-embedding expects {expected} features, basis has {found}")]
    Width { expected: usize, found: usize },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Layer(#[from] crate::layer::LayerError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BasisTokens {
    /// Original basis index.
    pub origin: usize,
    pub weight: f64,
    /// (token id, score), best first.
    pub tokens: Vec<(usize, f64)>,
}

/// Top `top_k` rows of `deembed · u` by score; ties go to the lower id.
pub fn top_tokens(deembed: &Matrix, u: &[f64], top_k: usize) -> Result<Vec<(usize, f64)>, InspectError> {
    if deembed.cols() != u.len() {
        return Err(InspectError::Width {
            expected: deembed.cols(),
            found: u.len(),
        });
    }
    let mut scored: Vec<(usize, f64)> = (0..deembed.rows())
        .map(|t| (t, deembed.row(t).iter().zip(u).map(|(a, b)| a * b).sum()))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(top_k);
    Ok(scored)
}

/// Ranked token lists for every kept basis of `layer`, in descending
/// `|s̃|`. Dense and finalized blocks are inspected through the SVD of
/// their effective weight.
pub fn inspect_basis(model: &ToyModel, layer: &str, top_k: usize) -> Result<Vec<BasisTokens>, InspectError> {
    let Some(index) = model.block_index(layer) else {
        return Err(InspectError::UnknownLayer {
            name: layer.to_string(),
            known: model.block_names().join(", "),
        });
    };
    let owned;
    let f = match &model.blocks[index] {
        Layer::Factorized(f) => f,
        other => {
            let (w, b) = other.effective();
            owned = FactorizedLinear::from_dense(&w, &b, 0, 0)?;
            &owned
        }
    };
    let mut order: Vec<usize> = (0..f.rank()).collect();
    let weights = f.weights();
    order.sort_by(|&a, &b| weights[b].abs().total_cmp(&weights[a].abs()).then(f.origin()[a].cmp(&f.origin()[b])));
    order
        .into_iter()
        .map(|k| {
            let u = f.base_u().column(k);
            Ok(BasisTokens {
                origin: f.origin()[k],
                weight: weights[k],
                tokens: top_tokens(&model.head.weight, &u, top_k)?,
            })
        })
        .collect()
}
