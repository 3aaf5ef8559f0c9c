use crate::linalg::{matmul, matmul_nt, matmul_tn, Matrix};

use super::LayerError;

/// Plain affine layer `y = W x (+ b)` over column batches.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLinear {
    pub weight: Matrix,
    pub bias: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct DenseGradients {
    pub d_weight: Matrix,
    pub d_bias: Option<Vec<f64>>,
    pub d_input: Matrix,
}

impl DenseLinear {
    pub fn new(weight: Matrix, bias: Option<Vec<f64>>) -> Result<Self, LayerError> {
        if let Some(b) = &bias {
            if b.len() != weight.rows() {
                return Err(LayerError::Shape(format!(
                    "bias of length {} for {} outputs",
                    b.len(),
                    weight.rows()
                )));
            }
        }
        Ok(Self { weight, bias })
    }

    pub fn in_features(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_features(&self) -> usize {
        self.weight.rows()
    }

    pub fn param_count(&self) -> usize {
        self.weight.rows() * self.weight.cols() + self.bias.as_ref().map_or(0, Vec::len)
    }

    pub fn forward(&self, inputs: &Matrix) -> Result<Matrix, LayerError> {
        let mut y = matmul(&self.weight, inputs)?;
        if let Some(b) = &self.bias {
            y.add_to_rows(b)?;
        }
        Ok(y)
    }

    pub fn backward(&self, inputs: &Matrix, upstream: &Matrix) -> Result<DenseGradients, LayerError> {
        Ok(DenseGradients {
            d_weight: matmul_nt(upstream, inputs)?,
            d_bias: self.bias.as_ref().map(|_| upstream.row_sums()),
            d_input: matmul_tn(&self.weight, upstream)?,
        })
    }
}

/// Two stacked dense layers replacing one factorized layer:
/// `first` (r'×m, no bias) then `second` (n×r', carrying the bias).
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankPair {
    pub first: DenseLinear,
    pub second: DenseLinear,
}

#[derive(Debug, Clone)]
pub struct PairGradients {
    pub d_first: Matrix,
    pub d_second: Matrix,
    pub d_bias: Vec<f64>,
    pub d_input: Matrix,
}

impl LowRankPair {
    pub fn rank(&self) -> usize {
        self.first.out_features()
    }

    pub fn in_features(&self) -> usize {
        self.first.in_features()
    }

    pub fn out_features(&self) -> usize {
        self.second.out_features()
    }

    /// `(n + m) · r' + n`.
    pub fn param_count(&self) -> usize {
        self.first.param_count() + self.second.param_count()
    }

    pub fn forward(&self, inputs: &Matrix) -> Result<Matrix, LayerError> {
        self.second.forward(&self.first.forward(inputs)?)
    }

    pub fn backward(&self, inputs: &Matrix, upstream: &Matrix) -> Result<PairGradients, LayerError> {
        let hidden = self.first.forward(inputs)?;
        let g2 = self.second.backward(&hidden, upstream)?;
        let g1 = self.first.backward(inputs, &g2.d_input)?;
        Ok(PairGradients {
            d_first: g1.d_weight,
            d_second: g2.d_weight,
            d_bias: g2.d_bias.unwrap_or_else(|| vec![0.0; self.out_features()]),
            d_input: g1.d_input,
        })
    }

    /// Dense product `second · first`.
    pub fn effective_weight(&self) -> Matrix {
        matmul(&self.second.weight, &self.first.weight).expect("pair shapes agree")
    }
}
