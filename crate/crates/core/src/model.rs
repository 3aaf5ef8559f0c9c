//! Feed-forward next-token model over a fixed character window.
//!
//! Token embeddings of the window are concatenated, passed through a stack
//! of linear + ReLU blocks and projected to vocabulary logits. Each block's
//! linear map can be dense, factorized (during compression) or a finalized
//! low-rank pair.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::layer::{Batch, DenseLinear, FactorizedLinear, LayerError, LowRankPair};
use crate::linalg::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub vocab: usize,
    pub context: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    /// Number of linear + ReLU blocks; the first maps `context·embed_dim → hidden`.
    pub blocks: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab: crate::corpus::vocab_size(),
            context: 8,
            embed_dim: 64,
            hidden: 256,
            blocks: 3,
        }
    }
}

impl ModelConfig {
    pub fn input_width(&self) -> usize {
        self.context * self.embed_dim
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dense(DenseLinear),
    Factorized(FactorizedLinear),
    LowRank(LowRankPair),
}

impl Layer {
    pub fn forward(&self, x: &Matrix) -> Result<Matrix, LayerError> {
        match self {
            Layer::Dense(l) => l.forward(x),
            Layer::Factorized(l) => l.forward(x),
            Layer::LowRank(l) => l.forward(x),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Layer::Dense(l) => l.param_count(),
            Layer::Factorized(l) => l.learnable_params(),
            Layer::LowRank(l) => l.param_count(),
        }
    }

    pub fn in_features(&self) -> usize {
        match self {
            Layer::Dense(l) => l.in_features(),
            Layer::Factorized(l) => l.in_features(),
            Layer::LowRank(l) => l.in_features(),
        }
    }

    pub fn out_features(&self) -> usize {
        match self {
            Layer::Dense(l) => l.out_features(),
            Layer::Factorized(l) => l.out_features(),
            Layer::LowRank(l) => l.out_features(),
        }
    }

    /// Rank of the map as stored: full for dense, r + r̃ for factorized, r' for a pair.
    pub fn stored_rank(&self) -> usize {
        match self {
            Layer::Dense(l) => l.in_features().min(l.out_features()),
            Layer::Factorized(l) => l.rank() + l.additional_dim(),
            Layer::LowRank(l) => l.rank(),
        }
    }

    /// Dense weight and bias of the affine map.
    pub fn effective(&self) -> (Matrix, Vec<f64>) {
        match self {
            Layer::Dense(l) => (
                l.weight.clone(),
                l.bias.clone().unwrap_or_else(|| vec![0.0; l.out_features()]),
            ),
            Layer::Factorized(l) => (l.materialize(), l.bias().to_vec()),
            Layer::LowRank(l) => (l.effective_weight(), l.second.bias.clone().unwrap_or_default()),
        }
    }

    fn param_slices_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        match self {
            Layer::Dense(l) => {
                let mut v = vec![("weight", l.weight.as_mut_slice())];
                if let Some(b) = l.bias.as_mut() {
                    v.push(("bias", b.as_mut_slice()));
                }
                v
            }
            Layer::Factorized(l) => vec![
                ("s", l.weights.as_mut_slice()),
                ("extra_u", l.extra_u.as_mut_slice()),
                ("extra_v", l.extra_v.as_mut_slice()),
                ("bias", l.bias.as_mut_slice()),
            ],
            Layer::LowRank(l) => {
                let mut v = vec![
                    ("first", l.first.weight.as_mut_slice()),
                    ("second", l.second.weight.as_mut_slice()),
                ];
                if let Some(b) = l.second.bias.as_mut() {
                    v.push(("bias", b.as_mut_slice()));
                }
                v
            }
        }
    }

    /// Parameter gradients (in `param_slices_mut` order) and ∂x.
    fn backward(&self, x: &Matrix, dy: &Matrix) -> Result<(Vec<Vec<f64>>, Matrix), LayerError> {
        match self {
            Layer::Dense(l) => {
                let g = l.backward(x, dy)?;
                let mut grads = vec![g.d_weight.into_vec()];
                if let Some(b) = g.d_bias {
                    grads.push(b);
                }
                Ok((grads, g.d_input))
            }
            Layer::Factorized(l) => {
                let g = l.backward(&Batch {
                    inputs: x.clone(),
                    upstream: dy.clone(),
                })?;
                Ok((
                    vec![g.d_weights, g.d_extra_u.into_vec(), g.d_extra_v.into_vec(), g.d_bias],
                    g.d_input,
                ))
            }
            Layer::LowRank(l) => {
                let g = l.backward(x, dy)?;
                let mut grads = vec![g.d_first.into_vec(), g.d_second.into_vec()];
                if l.second.bias.is_some() {
                    grads.push(g.d_bias);
                }
                Ok((grads, g.d_input))
            }
        }
    }
}

/// He-initialized dense layer with zero bias.
fn init_dense(out: usize, inp: usize, rng: &mut ChaCha8Rng) -> DenseLinear {
    let std = (2.0 / inp as f64).sqrt();
    DenseLinear {
        weight: Matrix::random_normal(out, inp, std, rng),
        bias: Some(vec![0.0; out]),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub config: ModelConfig,
    /// vocab × embed_dim.
    pub embedding: Matrix,
    pub blocks: Vec<Layer>,
    /// vocab × hidden.
    pub head: DenseLinear,
}

/// Activations kept from a forward pass for backpropagation.
struct Trace {
    /// Input of every block, then the input of the head.
    inputs: Vec<Matrix>,
    /// Pre-activation output of every block.
    pre: Vec<Matrix>,
    logits: Matrix,
}

pub fn block_name(i: usize) -> String {
    format!("blocks.{i}")
}

impl ToyModel {
    pub fn new(config: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embedding = Matrix::random_normal(config.vocab, config.embed_dim, 1.0, &mut rng);
        let mut blocks = Vec::with_capacity(config.blocks);
        let mut width = config.input_width();
        for _ in 0..config.blocks {
            blocks.push(Layer::Dense(init_dense(config.hidden, width, &mut rng)));
            width = config.hidden;
        }
        let head = init_dense(config.vocab, width, &mut rng);
        Self {
            config,
            embedding,
            blocks,
            head,
        }
    }

    /// Learnable scalars (frozen bases excluded).
    pub fn param_count(&self) -> usize {
        self.embedding.as_slice().len()
            + self.blocks.iter().map(Layer::param_count).sum::<usize>()
            + self.head.param_count()
    }

    pub fn block_names(&self) -> Vec<String> {
        (0..self.blocks.len()).map(block_name).collect()
    }

    pub fn block_index(&self, name: &str) -> Option<usize> {
        (0..self.blocks.len()).find(|&i| block_name(i) == name)
    }

    /// Names of every trainable tensor, in `params_mut` order.
    pub fn param_names(&mut self) -> Vec<String> {
        self.named_params_mut().into_iter().map(|(n, _)| n).collect()
    }

    /// Every trainable tensor with its name, in a fixed order.
    pub fn named_params_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = vec![("embedding".into(), self.embedding.as_mut_slice())];
        for (i, block) in self.blocks.iter_mut().enumerate() {
            for (suffix, data) in block.param_slices_mut() {
                out.push((format!("{}.{suffix}", block_name(i)), data));
            }
        }
        out.push(("head.weight".into(), self.head.weight.as_mut_slice()));
        if let Some(b) = self.head.bias.as_mut() {
            out.push(("head.bias".into(), b.as_mut_slice()));
        }
        out
    }

    fn embed(&self, windows: &[usize]) -> Matrix {
        let (c, d) = (self.config.context, self.config.embed_dim);
        let batch = windows.len() / c;
        let mut x = Matrix::zeros(c * d, batch);
        for b in 0..batch {
            for k in 0..c {
                let row = self.embedding.row(windows[b * c + k]);
                for (e, &value) in row.iter().enumerate() {
                    x.set(k * d + e, b, value);
                }
            }
        }
        x
    }

    fn trace(&self, windows: &[usize]) -> Result<Trace, LayerError> {
        if windows.len() % self.config.context != 0 {
            return Err(LayerError::Shape(format!(
                "{} tokens is not a whole number of {}-token windows",
                windows.len(),
                self.config.context
            )));
        }
        if let Some(&t) = windows.iter().find(|&&t| t >= self.config.vocab) {
            return Err(LayerError::Shape(format!("token {t} outside vocabulary")));
        }
        let mut inputs = vec![self.embed(windows)];
        let mut pre = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let z = block.forward(inputs.last().expect("nonempty"))?;
            let mut h = z.clone();
            for v in h.as_mut_slice() {
                *v = v.max(0.0);
            }
            pre.push(z);
            inputs.push(h);
        }
        let logits = self.head.forward(inputs.last().expect("nonempty"))?;
        Ok(Trace { inputs, pre, logits })
    }

    /// vocab × B logits for `B = windows.len() / context` windows.
    pub fn logits(&self, windows: &[usize]) -> Result<Matrix, LayerError> {
        Ok(self.trace(windows)?.logits)
    }

    /// Mean cross-entropy of `targets` given the windows.
    pub fn loss(&self, windows: &[usize], targets: &[usize]) -> Result<f64, LayerError> {
        let logits = self.logits(windows)?;
        Ok(softmax_cross_entropy(&logits, targets).0)
    }

    /// Mean cross-entropy and its gradient for every tensor of
    /// `named_params_mut`, in the same order.
    pub fn loss_and_grad(&self, windows: &[usize], targets: &[usize]) -> Result<(f64, Vec<Vec<f64>>), LayerError> {
        let trace = self.trace(windows)?;
        let (loss, dlogits) = softmax_cross_entropy(&trace.logits, targets);

        let head_in = trace.inputs.last().expect("nonempty");
        let gh = self.head.backward(head_in, &dlogits)?;
        let mut tail = vec![gh.d_weight.into_vec()];
        if let Some(b) = gh.d_bias {
            tail.push(b);
        }

        let mut upstream = gh.d_input;
        let mut block_grads = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate().rev() {
            for (g, z) in upstream.as_mut_slice().iter_mut().zip(trace.pre[i].as_slice()) {
                if *z <= 0.0 {
                    *g = 0.0;
                }
            }
            let (grads, d_in) = block.backward(&trace.inputs[i], &upstream)?;
            block_grads.push(grads);
            upstream = d_in;
        }
        block_grads.reverse();

        let (c, d) = (self.config.context, self.config.embed_dim);
        let mut d_embed = vec![0.0; self.embedding.as_slice().len()];
        for b in 0..targets.len() {
            for k in 0..c {
                let tok = windows[b * c + k];
                for e in 0..d {
                    d_embed[tok * d + e] += upstream.get(k * d + e, b);
                }
            }
        }

        let mut out = vec![d_embed];
        out.extend(block_grads.into_iter().flatten());
        out.extend(tail);
        Ok((loss, out))
    }
}

/// Mean cross-entropy over columns and its gradient w.r.t. the logits.
pub fn softmax_cross_entropy(logits: &Matrix, targets: &[usize]) -> (f64, Matrix) {
    let (v, batch) = logits.shape();
    assert_eq!(batch, targets.len(), "one target per column");
    let mut grad = Matrix::zeros(v, batch);
    let mut loss = 0.0;
    let scale = 1.0 / batch as f64;
    for b in 0..batch {
        let max = (0..v).map(|i| logits.get(i, b)).fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = (0..v).map(|i| (logits.get(i, b) - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - logits.get(targets[b], b);
        for i in 0..v {
            let p = (logits.get(i, b) - log_z).exp();
            let y = if i == targets[b] { 1.0 } else { 0.0 };
            grad.set(i, b, (p - y) * scale);
        }
    }
    (loss * scale, grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab: 7,
            context: 3,
            embed_dim: 4,
            hidden: 6,
            blocks: 3,
        }
    }

    fn mixed_model() -> ToyModel {
        let mut m = ToyModel::new(tiny(), 1);
        let (w, b) = m.blocks[1].effective();
        let mut f = FactorizedLinear::from_dense(&w, &b, 2, 3).unwrap();
        *f.extra_u_mut() = Matrix::random_normal(6, 2, 0.3, &mut ChaCha8Rng::seed_from_u64(4));
        m.blocks[1] = Layer::Factorized(f.clone());
        let (w, b) = m.blocks[2].effective();
        let g = FactorizedLinear::from_dense(&w, &b, 0, 0).unwrap();
        m.blocks[2] = Layer::LowRank(g.finalize().unwrap());
        m
    }

    #[test]
    fn full_model_gradient_matches_finite_differences() {
        let mut model = mixed_model();
        let windows = [1, 4, 2];
        let targets = [5];
        let (_, grads) = model.loss_and_grad(&windows, &targets).unwrap();
        let names = model.param_names();
        let h = 1e-5;
        for (t, name) in names.iter().enumerate() {
            let len = grads[t].len();
            for k in 0..len {
                let mut plus = model.clone();
                plus.named_params_mut()[t].1[k] += h;
                let mut minus = model.clone();
                minus.named_params_mut()[t].1[k] -= h;
                let num = (plus.loss(&windows, &targets).unwrap() - minus.loss(&windows, &targets).unwrap()) / (2.0 * h);
                let ana = grads[t][k];
                let denom = ana.abs().max(num.abs()).max(1e-6);
                assert!((ana - num).abs() / denom <= 1e-4, "{name}[{k}]: {ana} vs {num}");
            }
        }
        assert_eq!(names.len(), grads.len());
    }

    #[test]
    fn conversions_preserve_outputs() {
        let dense = ToyModel::new(tiny(), 9);
        let mut conv = dense.clone();
        for block in conv.blocks.iter_mut() {
            let (w, b) = block.effective();
            *block = Layer::Factorized(FactorizedLinear::from_dense(&w, &b, 1, 5).unwrap());
        }
        let windows = [0, 1, 2, 3, 4, 5, 6, 0, 1];
        let a = dense.logits(&windows).unwrap();
        let b = conv.logits(&windows).unwrap();
        assert!(a.sub(&b).unwrap().max_abs() < 1e-10);
    }

    #[test]
    fn param_count_enumerates_tensors() {
        let mut m = mixed_model();
        let by_tensors: usize = m.named_params_mut().iter().map(|(_, d)| d.len()).sum();
        assert_eq!(m.param_count(), by_tensors);
        let c = ModelConfig::default();
        let dense = ToyModel::new(c, 0);
        let expected = c.vocab * c.embed_dim
            + (c.input_width() * c.hidden + c.hidden)
            + 2 * (c.hidden * c.hidden + c.hidden)
            + (c.hidden * c.vocab + c.vocab);
        assert_eq!(dense.param_count(), expected);
    }

    #[test]
    fn rejects_out_of_vocab_tokens() {
        let m = ToyModel::new(tiny(), 0);
        assert!(m.logits(&[0, 1, 99]).is_err());
        assert!(m.logits(&[0, 1]).is_err());
    }

    #[test]
    fn cross_entropy_of_uniform_logits() {
        let (loss, grad) = softmax_cross_entropy(&Matrix::zeros(4, 2), &[0, 3]);
        assert!((loss - 4f64.ln()).abs() < 1e-15);
        assert!((grad.get(0, 0) - (0.25 - 1.0) / 2.0).abs() < 1e-15);
    }
}
