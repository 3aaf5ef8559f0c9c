use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::linalg::{matmul, matmul_nt, matmul_tn, svd, Matrix};

use super::{DenseLinear, LayerError, LowRankPair};

/// Linear layer expressed over its own SVD bases:
///
/// `W̃ = Σᵢ s̃ᵢ uᵢ vᵢᵀ + Σⱼ ũⱼ ṽⱼᵀ`, `y = W̃ x + b`.
///
/// The bases `uᵢ vᵢᵀ` are frozen; only the singular weights `s̃`, the
/// augmentation vectors `ũ`, `ṽ` and the bias are trained. Pruning deletes
/// basis columns and never edits the surviving ones.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorizedLinear {
    pub(crate) base_u: Matrix,
    pub(crate) base_v: Matrix,
    pub(crate) weights: Vec<f64>,
    pub(crate) extra_u: Matrix,
    pub(crate) extra_v: Matrix,
    pub(crate) bias: Vec<f64>,
    /// Index of each surviving basis in the original SVD ordering.
    pub(crate) origin: Vec<usize>,
}

/// Inputs retained from the forward pass plus the gradient flowing back.
#[derive(Debug, Clone)]
pub struct Batch {
    /// m×B, one sample per column.
    pub inputs: Matrix,
    /// n×B, ∂loss/∂y.
    pub upstream: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradients {
    pub d_weights: Vec<f64>,
    pub d_extra_u: Matrix,
    pub d_extra_v: Matrix,
    pub d_bias: Vec<f64>,
    pub d_input: Matrix,
}

/// Outcome of one mass-based pruning round.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneOutcome {
    pub pruned: usize,
    /// Kept Σ|s̃| over total Σ|s̃| before pruning (1 when the total is 0).
    pub kept_fraction: f64,
    /// Positions (in the pre-pruning layout) of the survivors.
    pub kept_positions: Vec<usize>,
    /// Original basis indices of the survivors, in layer order.
    pub kept_origin: Vec<usize>,
}

/// Positions of the shortest prefix, in descending `|magnitude|` order
/// (ties: smaller `tie_key` first), whose mass reaches `ratio` of the total.
/// At least one position is always kept. Returned positions are sorted.
pub fn select_by_mass(magnitudes: &[f64], tie_key: &[usize], ratio: f64) -> Vec<usize> {
    assert_eq!(magnitudes.len(), tie_key.len());
    let n = magnitudes.len();
    if n == 0 {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        magnitudes[b]
            .abs()
            .total_cmp(&magnitudes[a].abs())
            .then(tie_key[a].cmp(&tie_key[b]))
    });
    let keep = if ratio >= 1.0 {
        n
    } else {
        let total: f64 = order.iter().map(|&i| magnitudes[i].abs()).sum();
        let target = ratio * total;
        let mut acc = 0.0;
        let mut count = n;
        for (k, &i) in order.iter().enumerate() {
            acc += magnitudes[i].abs();
            if acc >= target {
                count = k + 1;
                break;
            }
        }
        count.max(1)
    };
    let mut kept: Vec<usize> = order[..keep].to_vec();
    kept.sort_unstable();
    kept
}

impl FactorizedLinear {
    /// Converts a dense weight matrix `w` (n×m) and bias into bases plus
    /// `additional_dim` augmentation pairs.
    ///
    /// `ũ` starts at zero and `ṽ ~ N(0, 1/m)`, so the layer initially
    /// reproduces `w` exactly whatever the seed.
    pub fn from_dense(
        w: &Matrix,
        bias: &[f64],
        additional_dim: usize,
        seed: u64,
    ) -> Result<Self, LayerError> {
        let (n, m) = w.shape();
        if bias.len() != n {
            return Err(LayerError::Shape(format!("bias of length {} for {n} outputs", bias.len())));
        }
        let f = svd(w)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 1.0 / (m.max(1) as f64).sqrt();
        Ok(Self {
            origin: (0..f.rank()).collect(),
            base_u: f.u,
            base_v: f.v,
            weights: f.s,
            extra_u: Matrix::zeros(n, additional_dim),
            extra_v: Matrix::random_normal(m, additional_dim, std, &mut rng),
            bias: bias.to_vec(),
        })
    }

    pub fn in_features(&self) -> usize {
        self.base_v.rows()
    }

    pub fn out_features(&self) -> usize {
        self.base_u.rows()
    }

    /// Number of surviving pretrained bases.
    pub fn rank(&self) -> usize {
        self.weights.len()
    }

    pub fn additional_dim(&self) -> usize {
        self.extra_u.cols()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn base_u(&self) -> &Matrix {
        &self.base_u
    }

    pub fn base_v(&self) -> &Matrix {
        &self.base_v
    }

    pub fn extra_u(&self) -> &Matrix {
        &self.extra_u
    }

    pub fn extra_u_mut(&mut self) -> &mut Matrix {
        &mut self.extra_u
    }

    pub fn extra_v(&self) -> &Matrix {
        &self.extra_v
    }

    pub fn extra_v_mut(&mut self) -> &mut Matrix {
        &mut self.extra_v
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    pub fn origin(&self) -> &[usize] {
        &self.origin
    }

    /// Σ|s̃ᵢ|.
    pub fn singular_mass(&self) -> f64 {
        self.weights.iter().map(|w| w.abs()).sum()
    }

    /// Trainable scalars: `r + (n + m)·r̃ + n`. The frozen bases are not counted.
    pub fn learnable_params(&self) -> usize {
        let (n, m) = (self.out_features(), self.in_features());
        self.rank() + (n + m) * self.additional_dim() + n
    }

    /// Rebuilds a layer from stored parts, checking every shape.
    pub fn from_parts(
        base_u: Matrix,
        base_v: Matrix,
        weights: Vec<f64>,
        extra_u: Matrix,
        extra_v: Matrix,
        bias: Vec<f64>,
        origin: Vec<usize>,
    ) -> Result<Self, LayerError> {
        let (n, r) = base_u.shape();
        let m = base_v.rows();
        let ok = base_v.cols() == r
            && weights.len() == r
            && origin.len() == r
            && extra_u.rows() == n
            && extra_v.rows() == m
            && extra_u.cols() == extra_v.cols()
            && bias.len() == n;
        if !ok {
            return Err(LayerError::Shape("inconsistent factorized layer parts".into()));
        }
        Ok(Self {
            base_u,
            base_v,
            weights,
            extra_u,
            extra_v,
            bias,
            origin,
        })
    }

    fn check_inputs(&self, inputs: &Matrix) -> Result<(), LayerError> {
        if inputs.rows() != self.in_features() {
            return Err(LayerError::Shape(format!(
                "input has {} features, layer expects {}",
                inputs.rows(),
                self.in_features()
            )));
        }
        Ok(())
    }

    /// `y = U diag(s̃) Vᵀ x + Ũ Ṽᵀ x + b`, evaluated right to left so the
    /// n×m matrix is never formed.
    pub fn forward(&self, inputs: &Matrix) -> Result<Matrix, LayerError> {
        self.check_inputs(inputs)?;
        let projected = matmul_tn(&self.base_v, inputs)?.scale_rows(&self.weights)?;
        let mut y = matmul(&self.base_u, &projected)?;
        if self.additional_dim() > 0 {
            let q = matmul_tn(&self.extra_v, inputs)?;
            y.add_assign(&matmul(&self.extra_u, &q)?)?;
        }
        y.add_to_rows(&self.bias)?;
        Ok(y)
    }

    /// Gradients of all trainable parts for `G = δy xᵀ` (never formed):
    /// `∂s̃ᵢ = uᵢᵀ G vᵢ`, `∂Ũ = G Ṽ`, `∂Ṽ = Gᵀ Ũ`, `∂b = Σ δy`, `∂x = W̃ᵀ δy`.
    pub fn backward(&self, batch: &Batch) -> Result<LayerGradients, LayerError> {
        self.check_inputs(&batch.inputs)?;
        let (n, b) = batch.upstream.shape();
        if n != self.out_features() || b != batch.inputs.cols() {
            return Err(LayerError::Shape(format!(
                "upstream gradient {n}x{b} for layer with {} outputs and batch {}",
                self.out_features(),
                batch.inputs.cols()
            )));
        }
        let x = &batch.inputs;
        let dy = &batch.upstream;

        let vx = matmul_tn(&self.base_v, x)?; // r×B
        let udy = matmul_tn(&self.base_u, dy)?; // r×B
        let d_weights = (0..self.rank())
            .map(|i| udy.row(i).iter().zip(vx.row(i)).map(|(a, c)| a * c).sum())
            .collect();
        let mut d_input = matmul(&self.base_v, &udy.scale_rows(&self.weights)?)?;

        let rt = self.additional_dim();
        let (d_extra_u, d_extra_v) = if rt > 0 {
            let q = matmul_tn(&self.extra_v, x)?; // r̃×B
            let c = matmul_tn(&self.extra_u, dy)?; // r̃×B
            d_input.add_assign(&matmul(&self.extra_v, &c)?)?;
            (matmul_nt(dy, &q)?, matmul_nt(x, &c)?)
        } else {
            (Matrix::zeros(n, 0), Matrix::zeros(self.in_features(), 0))
        };

        Ok(LayerGradients {
            d_weights,
            d_extra_u,
            d_extra_v,
            d_bias: dy.row_sums(),
            d_input,
        })
    }

    /// Keeps the shortest set of bases, largest |s̃| first, whose mass is at
    /// least `keep_ratio_per_pruning` of the current total.
    pub fn prune_by_mass(&mut self, keep_ratio_per_pruning: f64) -> Result<PruneOutcome, LayerError> {
        if !(keep_ratio_per_pruning > 0.0 && keep_ratio_per_pruning <= 1.0) {
            return Err(LayerError::KeepRatio(keep_ratio_per_pruning));
        }
        if self.rank() == 0 {
            return Err(LayerError::EmptyLayer);
        }
        let total = self.singular_mass();
        let kept = select_by_mass(&self.weights, &self.origin, keep_ratio_per_pruning);
        let kept_mass: f64 = kept.iter().map(|&i| self.weights[i].abs()).sum();
        let pruned = self.rank() - kept.len();
        self.retain(&kept);
        Ok(PruneOutcome {
            pruned,
            kept_positions: kept,
            kept_fraction: if total > 0.0 { kept_mass / total } else { 1.0 },
            kept_origin: self.origin.clone(),
        })
    }

    /// Keeps the bases at the given (sorted) positions.
    pub fn retain(&mut self, positions: &[usize]) {
        self.base_u = self.base_u.select_columns(positions);
        self.base_v = self.base_v.select_columns(positions);
        self.weights = positions.iter().map(|&i| self.weights[i]).collect();
        self.origin = positions.iter().map(|&i| self.origin[i]).collect();
    }

    /// Dense `W̃ = Σ s̃ᵢ uᵢ vᵢᵀ + Σ ũⱼ ṽⱼᵀ`.
    pub fn materialize(&self) -> Matrix {
        let scaled = self.base_u.scale_columns(&self.weights).expect("rank agrees");
        let mut w = matmul_nt(&scaled, &self.base_v).expect("bases agree");
        if self.additional_dim() > 0 {
            w.add_assign(&matmul_nt(&self.extra_u, &self.extra_v).expect("extras agree"))
                .expect("shapes agree");
        }
        w
    }

    /// Re-factorizes `W̃ = U' S' V'ᵀ` and splits it into a first layer with
    /// weight `S' V'ᵀ` and a second layer with weight `U'` and the bias.
    pub fn finalize(&self) -> Result<LowRankPair, LayerError> {
        let f = svd(&self.materialize())?;
        let first = f.v.scale_columns(&f.s)?.transpose();
        Ok(LowRankPair {
            first: DenseLinear::new(first, None)?,
            second: DenseLinear::new(f.u, Some(self.bias.clone()))?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::outer;
    use proptest::prelude::*;
    use rand::Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_layer(n: usize, m: usize, rt: usize, seed: u64) -> FactorizedLinear {
        let mut r = rng(seed);
        let w = Matrix::random_normal(n, m, 1.0, &mut r);
        let bias: Vec<f64> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
        let mut layer = FactorizedLinear::from_dense(&w, &bias, rt, seed).unwrap();
        // Move away from the zero-init point so every gradient path is live.
        for s in layer.weights_mut() {
            *s *= r.gen_range(0.5..1.5);
        }
        *layer.extra_u_mut() = Matrix::random_normal(n, rt, 0.5, &mut r);
        layer
    }

    fn rel_diff(a: &Matrix, b: &Matrix) -> f64 {
        a.sub(b).unwrap().frobenius_norm() / b.frobenius_norm().max(1e-300)
    }

    #[test]
    fn diagonal_conversion() {
        let w = Matrix::from_diag(&[3.0, 2.0, 1.0]);
        let layer = FactorizedLinear::from_dense(&w, &[0.0; 3], 0, 0).unwrap();
        assert_eq!(layer.weights(), &[3.0, 2.0, 1.0]);
        assert_eq!(layer.materialize(), w);
    }

    #[test]
    fn zero_init_augmentation_matches_dense_and_ignores_seed() {
        let mut r = rng(1);
        let w = Matrix::random_normal(7, 5, 1.0, &mut r);
        let bias: Vec<f64> = (0..7).map(|i| i as f64 * 0.1).collect();
        let x = Matrix::random_normal(5, 3, 1.0, &mut r);
        let dense = DenseLinear::new(w.clone(), Some(bias.clone())).unwrap();
        let expected = dense.forward(&x).unwrap();
        let a = FactorizedLinear::from_dense(&w, &bias, 4, 10).unwrap();
        let b = FactorizedLinear::from_dense(&w, &bias, 4, 99).unwrap();
        let ya = a.forward(&x).unwrap();
        assert!(rel_diff(&ya, &expected) <= 1e-10);
        assert_eq!(ya, b.forward(&x).unwrap());
        assert_ne!(a.extra_v(), b.extra_v());
    }

    #[test]
    fn random_conversion_reconstructs() {
        let w = Matrix::random_normal(32, 16, 1.0, &mut rng(2));
        let layer = FactorizedLinear::from_dense(&w, &[0.0; 32], 3, 2).unwrap();
        assert!(rel_diff(&layer.materialize(), &w) <= 1e-10);
    }

    #[test]
    fn single_filter_activation() {
        let u = Matrix::from_vec(3, 1, vec![1.0, 0.0, 0.0]).unwrap();
        let v = Matrix::from_vec(4, 1, vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        let layer = FactorizedLinear::from_parts(
            u,
            v,
            vec![2.0],
            Matrix::zeros(3, 0),
            Matrix::zeros(4, 0),
            vec![0.0; 3],
            vec![0],
        )
        .unwrap();
        let x = Matrix::from_vec(4, 1, vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(layer.forward(&x).unwrap().as_slice(), &[2.0, 0.0, 0.0]);
    }

    #[test]
    fn orthogonal_input_yields_bias() {
        // Bases span the first two coordinates of R⁴; x lives in the rest.
        let w = Matrix::from_fn(3, 4, |i, j| if j < 2 { (i + j + 1) as f64 } else { 0.0 });
        let bias = vec![0.5, -1.0, 2.0];
        let layer = FactorizedLinear::from_dense(&w, &bias, 0, 0).unwrap();
        let x = Matrix::from_vec(4, 1, vec![0.0, 0.0, 3.0, -2.0]).unwrap();
        let y = layer.forward(&x).unwrap();
        for (a, b) in y.as_slice().iter().zip(&bias) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn factored_forward_matches_dense_path() {
        let layer = random_layer(12, 9, 3, 3);
        let x = Matrix::random_normal(9, 6, 1.0, &mut rng(4));
        let mut dense = matmul(&layer.materialize(), &x).unwrap();
        dense.add_to_rows(layer.bias()).unwrap();
        assert!(rel_diff(&layer.forward(&x).unwrap(), &dense) <= 1e-10);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let layer = random_layer(5, 4, 2, 5);
        let batch = Batch {
            inputs: Matrix::random_normal(4, 3, 1.0, &mut rng(6)),
            upstream: Matrix::zeros(5, 3),
        };
        let g = layer.backward(&batch).unwrap();
        assert!(g.d_weights.iter().all(|&x| x == 0.0));
        assert_eq!(g.d_extra_u.max_abs(), 0.0);
        assert_eq!(g.d_extra_v.max_abs(), 0.0);
        assert!(g.d_bias.iter().all(|&x| x == 0.0));
        assert_eq!(g.d_input.max_abs(), 0.0);
    }

    #[test]
    fn scalar_chain_rule() {
        let one = || Matrix::from_vec(1, 1, vec![1.0]).unwrap();
        let layer = FactorizedLinear::from_parts(
            one(),
            one(),
            vec![2.0],
            Matrix::zeros(1, 0),
            Matrix::zeros(1, 0),
            vec![0.0],
            vec![0],
        )
        .unwrap();
        let g = layer
            .backward(&Batch {
                inputs: Matrix::from_vec(1, 1, vec![3.0]).unwrap(),
                upstream: one(),
            })
            .unwrap();
        assert_eq!(g.d_weights, vec![3.0]);
        assert_eq!(g.d_input.as_slice(), &[2.0]);
    }

    /// Loss ½‖y‖² so that δy = y.
    fn half_sq_loss(layer: &FactorizedLinear, x: &Matrix) -> f64 {
        0.5 * layer.forward(x).unwrap().as_slice().iter().map(|v| v * v).sum::<f64>()
    }

    fn check_close(analytic: f64, numeric: f64, what: &str) {
        let denom = analytic.abs().max(numeric.abs()).max(1e-6);
        assert!(
            (analytic - numeric).abs() / denom <= 1e-4,
            "{what}: analytic {analytic} vs numeric {numeric}"
        );
    }

    fn finite_difference_check(layer: &FactorizedLinear, x: &Matrix) {
        let h = 1e-5;
        let y = layer.forward(x).unwrap();
        let g = layer
            .backward(&Batch {
                inputs: x.clone(),
                upstream: y,
            })
            .unwrap();
        let central = |f: &dyn Fn(&mut FactorizedLinear, f64)| {
            let mut plus = layer.clone();
            f(&mut plus, h);
            let mut minus = layer.clone();
            f(&mut minus, -h);
            (half_sq_loss(&plus, x) - half_sq_loss(&minus, x)) / (2.0 * h)
        };
        for i in 0..layer.rank() {
            let num = central(&|l, d| l.weights[i] += d);
            check_close(g.d_weights[i], num, "weights");
        }
        for k in 0..layer.extra_u.as_slice().len() {
            let num = central(&|l, d| l.extra_u.as_mut_slice()[k] += d);
            check_close(g.d_extra_u.as_slice()[k], num, "extra_u");
        }
        for k in 0..layer.extra_v.as_slice().len() {
            let num = central(&|l, d| l.extra_v.as_mut_slice()[k] += d);
            check_close(g.d_extra_v.as_slice()[k], num, "extra_v");
        }
        for k in 0..layer.bias.len() {
            let num = central(&|l, d| l.bias[k] += d);
            check_close(g.d_bias[k], num, "bias");
        }
        for k in 0..x.as_slice().len() {
            let mut xp = x.clone();
            xp.as_mut_slice()[k] += h;
            let mut xm = x.clone();
            xm.as_mut_slice()[k] -= h;
            let num = (half_sq_loss(layer, &xp) - half_sq_loss(layer, &xm)) / (2.0 * h);
            check_close(g.d_input.as_slice()[k], num, "input");
        }
    }

    #[test]
    fn gradients_match_finite_differences_8x6() {
        let layer = random_layer(8, 6, 2, 7);
        let x = Matrix::random_normal(6, 4, 1.0, &mut rng(8));
        finite_difference_check(&layer, &x);
    }

    #[test]
    fn base_vectors_receive_no_updates() {
        let layer = random_layer(6, 5, 1, 9);
        let (u, v) = (layer.base_u().clone(), layer.base_v().clone());
        let mut trained = layer.clone();
        let x = Matrix::random_normal(5, 3, 1.0, &mut rng(10));
        for _ in 0..5 {
            let y = trained.forward(&x).unwrap();
            let g = trained.backward(&Batch { inputs: x.clone(), upstream: y }).unwrap();
            for (s, d) in trained.weights.iter_mut().zip(&g.d_weights) {
                *s -= 0.1 * d;
            }
        }
        assert_eq!(trained.base_u(), &u);
        assert_eq!(trained.base_v(), &v);
    }

    fn layer_with_weights(weights: &[f64]) -> FactorizedLinear {
        let r = weights.len();
        FactorizedLinear::from_parts(
            Matrix::identity(r),
            Matrix::identity(r),
            weights.to_vec(),
            Matrix::zeros(r, 0),
            Matrix::zeros(r, 0),
            vec![0.0; r],
            (0..r).collect(),
        )
        .unwrap()
    }

    #[test]
    fn prune_prefix_arithmetic() {
        let mut layer = layer_with_weights(&[4.0, 3.0, 2.0, 1.0]);
        let out = layer.prune_by_mass(0.7).unwrap();
        assert_eq!(out.pruned, 2);
        assert_eq!(layer.weights(), &[4.0, 3.0]);
        assert!((out.kept_fraction - 0.7).abs() < 1e-15);
    }

    #[test]
    fn prune_ratio_one_is_noop() {
        let mut layer = layer_with_weights(&[4.0, 3.0, 2.0, 1.0]);
        assert_eq!(layer.prune_by_mass(1.0).unwrap().pruned, 0);
        assert_eq!(layer.rank(), 4);
    }

    #[test]
    fn prune_ties_keep_lower_indices() {
        // Enumerate all prefixes of the tie-broken order to find the
        // shortest one with half the mass: two bases, the first two.
        let weights = [2.0, 2.0, 2.0, 2.0];
        let total: f64 = weights.iter().sum();
        let shortest = (1..=4).find(|&k| weights[..k].iter().sum::<f64>() >= 0.5 * total).unwrap();
        assert_eq!(shortest, 2);
        let mut layer = layer_with_weights(&weights);
        layer.prune_by_mass(0.5).unwrap();
        assert_eq!(layer.origin(), &[0, 1]);
    }

    #[test]
    fn prune_ranks_by_magnitude() {
        let mut layer = layer_with_weights(&[0.5, -3.0, 1.0, 0.1]);
        layer.prune_by_mass(0.6).unwrap();
        assert_eq!(layer.origin(), &[1]);
        assert_eq!(layer.weights(), &[-3.0]);
    }

    #[test]
    fn prune_keeps_one_basis_even_when_all_weights_vanish() {
        let mut layer = layer_with_weights(&[0.0, 0.0, 0.0]);
        let out = layer.prune_by_mass(0.1).unwrap();
        assert_eq!(layer.rank(), 1);
        assert_eq!(out.kept_fraction, 1.0);
    }

    #[test]
    fn prune_rejects_bad_ratio() {
        let mut layer = layer_with_weights(&[1.0]);
        assert!(matches!(layer.prune_by_mass(0.0), Err(LayerError::KeepRatio(_))));
        assert!(matches!(layer.prune_by_mass(1.5), Err(LayerError::KeepRatio(_))));
        assert!(matches!(layer.prune_by_mass(f64::NAN), Err(LayerError::KeepRatio(_))));
    }

    #[test]
    fn pruning_only_deletes_columns() {
        let mut layer = random_layer(10, 8, 0, 11);
        let before = layer.clone();
        layer.prune_by_mass(0.6).unwrap();
        for (k, &o) in layer.origin().iter().enumerate() {
            let pos = before.origin().iter().position(|&x| x == o).unwrap();
            assert_eq!(layer.base_u().column(k), before.base_u().column(pos));
            assert_eq!(layer.base_v().column(k), before.base_v().column(pos));
        }
    }

    #[test]
    fn materialize_matches_naive_sum() {
        let layer = random_layer(7, 5, 2, 12);
        let mut naive = Matrix::zeros(7, 5);
        for i in 0..layer.rank() {
            let b = outer(&layer.base_u().column(i), &layer.base_v().column(i));
            naive.add_assign(&b.scaled(layer.weights()[i])).unwrap();
        }
        for j in 0..layer.additional_dim() {
            naive
                .add_assign(&outer(&layer.extra_u().column(j), &layer.extra_v().column(j)))
                .unwrap();
        }
        assert!(layer.materialize().sub(&naive).unwrap().max_abs() <= 1e-12);
    }

    #[test]
    fn empty_layer_materializes_to_zero() {
        let layer = FactorizedLinear::from_parts(
            Matrix::zeros(3, 0),
            Matrix::zeros(2, 0),
            vec![],
            Matrix::zeros(3, 0),
            Matrix::zeros(2, 0),
            vec![0.0; 3],
            vec![],
        )
        .unwrap();
        assert_eq!(layer.materialize(), Matrix::zeros(3, 2));
    }

    #[test]
    fn finalize_diagonal() {
        let layer = FactorizedLinear::from_dense(&Matrix::from_diag(&[3.0, 2.0, 1.0]), &[1.0; 3], 0, 0).unwrap();
        let pair = layer.finalize().unwrap();
        assert_eq!(pair.rank(), 3);
        let x = Matrix::identity(3);
        let mut expected = Matrix::from_diag(&[3.0, 2.0, 1.0]);
        expected.add_to_rows(&[1.0; 3]).unwrap();
        assert_eq!(pair.forward(&x).unwrap(), expected);
        assert_eq!(pair.param_count(), (3 + 3) * 3 + 3);
    }

    #[test]
    fn finalize_pruned_layer_composes() {
        let mut layer = random_layer(20, 14, 2, 13);
        layer.prune_by_mass(0.5).unwrap();
        let pair = layer.finalize().unwrap();
        let expected_rank = layer.rank() + layer.additional_dim();
        assert_eq!(pair.rank(), expected_rank);
        assert_eq!(pair.param_count(), (20 + 14) * expected_rank + 20);
        let w = layer.materialize();
        let mut r = rng(14);
        for _ in 0..100 {
            let x = Matrix::random_normal(14, 1, 1.0, &mut r);
            let mut dense = matmul(&w, &x).unwrap();
            dense.add_to_rows(layer.bias()).unwrap();
            assert!(rel_diff(&pair.forward(&x).unwrap(), &dense) <= 1e-8);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn gradients_match_for_small_layers(n in 1usize..=10, m in 1usize..=10, rt in 0usize..=3, seed in any::<u64>()) {
            let layer = random_layer(n, m, rt, seed);
            let x = Matrix::random_normal(m, 2, 1.0, &mut rng(seed ^ 0xabc));
            finite_difference_check(&layer, &x);
        }

        #[test]
        fn forward_equals_dense(n in 1usize..16, m in 1usize..16, rt in 0usize..4, seed in any::<u64>()) {
            let layer = random_layer(n, m, rt, seed);
            let x = Matrix::random_normal(m, 3, 1.0, &mut rng(seed.wrapping_add(1)));
            let mut dense = matmul(&layer.materialize(), &x).unwrap();
            dense.add_to_rows(layer.bias()).unwrap();
            prop_assert!(rel_diff(&layer.forward(&x).unwrap(), &dense) <= 1e-9);
        }

        #[test]
        fn pruning_is_monotone_and_minimal(
            weights in proptest::collection::vec(-10.0f64..10.0, 1..40),
            ratio in 0.01f64..1.0,
        ) {
            let mut layer = layer_with_weights(&weights);
            let before = layer.rank();
            let total: f64 = weights.iter().map(|w| w.abs()).sum();
            layer.prune_by_mass(ratio).unwrap();
            prop_assert!(layer.rank() <= before && layer.rank() >= 1);
            let kept: Vec<f64> = layer.weights().iter().map(|w| w.abs()).collect();
            let kept_mass: f64 = kept.iter().sum();
            if total > 0.0 {
                prop_assert!(kept_mass >= ratio * total * (1.0 - 1e-12));
                let smallest = kept.iter().copied().fold(f64::INFINITY, f64::min);
                if layer.rank() > 1 {
                    prop_assert!(kept_mass - smallest < ratio * total);
                }
            }
        }
    }
}
