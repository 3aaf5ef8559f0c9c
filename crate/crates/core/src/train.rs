//! Minibatch training and exact-match evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::{EvalItem, TaskSpec, TrainSet, PAD};
use crate::layer::LayerError;
use crate::linalg::Matrix;
use crate::model::ToyModel;
use crate::optim::{Adam, AdamConfig};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error("training diverged: loss is {loss} at iteration {iteration}")]
    Diverged { iteration: usize, loss: f64 },
    #[error("training data is empty")]
    EmptyData,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            adam: AdamConfig::default(),
        }
    }
}

/// Endless shuffled minibatches; reshuffles at every epoch boundary.
#[derive(Debug, Clone)]
pub struct BatchStream<'a> {
    set: &'a TrainSet,
    batch_size: usize,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl<'a> BatchStream<'a> {
    pub fn new(set: &'a TrainSet, batch_size: usize, seed: u64) -> Result<Self, TrainError> {
        if set.is_empty() || batch_size == 0 {
            return Err(TrainError::EmptyData);
        }
        let mut s = Self {
            set,
            batch_size,
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..set.len()).collect(),
            cursor: 0,
        };
        s.order.shuffle(&mut s.rng);
        Ok(s)
    }

    /// `ceil(samples / batch_size)`.
    pub fn iterations_per_epoch(&self) -> usize {
        self.set.len().div_ceil(self.batch_size)
    }

    /// Next batch as (flattened windows, targets).
    pub fn next_batch(&mut self) -> (Vec<usize>, Vec<usize>) {
        if self.cursor >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let idx = &self.order[self.cursor..end];
        self.cursor = end;
        let mut windows = Vec::with_capacity(idx.len() * self.set.context);
        let mut targets = Vec::with_capacity(idx.len());
        for &i in idx {
            windows.extend_from_slice(self.set.window(i));
            targets.push(self.set.targets[i]);
        }
        (windows, targets)
    }
}

/// Fractional epochs to whole iterations, rounding half away from zero.
pub fn epochs_to_iterations(epochs: f64, iterations_per_epoch: usize) -> usize {
    (epochs * iterations_per_epoch as f64).round().max(0.0) as usize
}

/// Model, optimizer and data stream advanced together.
pub struct Trainer<'a> {
    pub model: ToyModel,
    pub optimizer: Adam,
    pub stream: BatchStream<'a>,
    pub iteration: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(model: ToyModel, set: &'a TrainSet, config: TrainConfig, seed: u64) -> Result<Self, TrainError> {
        Ok(Self {
            model,
            optimizer: Adam::new(config.adam),
            stream: BatchStream::new(set, config.batch_size, seed)?,
            iteration: 0,
        })
    }

    /// One optimizer step; returns the batch loss before the update.
    pub fn step(&mut self) -> Result<f64, TrainError> {
        let (windows, targets) = self.stream.next_batch();
        let (loss, grads) = self.model.loss_and_grad(&windows, &targets)?;
        self.iteration += 1;
        if !loss.is_finite() {
            return Err(TrainError::Diverged {
                iteration: self.iteration,
                loss,
            });
        }
        self.optimizer.step(&mut self.model, &grads);
        Ok(loss)
    }

    pub fn run(&mut self, iterations: usize) -> Result<Vec<f64>, TrainError> {
        (0..iterations).map(|_| self.step()).collect()
    }
}

/// Trains on `lines` for `epochs` (fractional allowed). Returns the model
/// and the per-iteration loss curve.
pub fn train_on_lines(
    model: ToyModel,
    lines: &[String],
    epochs: f64,
    config: TrainConfig,
    seed: u64,
) -> Result<(ToyModel, Vec<f64>), TrainError> {
    let set = TrainSet::from_lines(lines, model.config.context);
    let mut trainer = Trainer::new(model, &set, config, seed)?;
    let iters = epochs_to_iterations(epochs, trainer.stream.iterations_per_epoch());
    let curve = trainer.run(iters)?;
    Ok((trainer.model, curve))
}

/// Pretraining on the mixed corpus.
pub fn pretrain(
    model: ToyModel,
    corpus: &[String],
    epochs: f64,
    config: TrainConfig,
    seed: u64,
) -> Result<(ToyModel, Vec<f64>), TrainError> {
    train_on_lines(model, corpus, epochs, config, seed)
}

/// Finetuning on a target task's training split.
pub fn finetune(
    model: ToyModel,
    task: &TaskSpec,
    epochs: f64,
    config: TrainConfig,
    seed: u64,
) -> Result<(ToyModel, Vec<f64>), TrainError> {
    train_on_lines(model, &task.train, epochs, config, seed)
}

/// Anything that scores the next token for a batch of windows.
pub trait Predictor {
    fn context_len(&self) -> usize;
    /// vocab × B logits for `B = windows.len() / context_len()`.
    fn next_logits(&self, windows: &[usize]) -> Matrix;
}

impl Predictor for ToyModel {
    fn context_len(&self) -> usize {
        self.config.context
    }

    fn next_logits(&self, windows: &[usize]) -> Matrix {
        self.logits(windows).expect("windows built from the model's vocabulary")
    }
}

/// Index of the largest entry in column `b`; first index on ties.
fn argmax_column(logits: &Matrix, b: usize) -> usize {
    let mut best = 0;
    for i in 1..logits.rows() {
        if logits.get(i, b) > logits.get(best, b) {
            best = i;
        }
    }
    best
}

/// Fraction of items whose greedy decode reproduces the answer span.
/// Decoding of an item stops at its answer length or at the first `;`.
pub fn evaluate_items<P: Predictor + ?Sized>(predictor: &P, items: &[EvalItem]) -> f64 {
    if items.is_empty() {
        return 0.0;
    }
    let c = predictor.context_len();
    let terminator = crate::corpus::encode(";")[0];
    let mut generated: Vec<Vec<usize>> = vec![Vec::new(); items.len()];
    let mut active: Vec<usize> = (0..items.len()).collect();
    while !active.is_empty() {
        let mut windows = Vec::with_capacity(active.len() * c);
        for &i in &active {
            let mut seq = vec![PAD; c];
            seq.extend_from_slice(&items[i].prompt);
            seq.extend_from_slice(&generated[i]);
            windows.extend_from_slice(&seq[seq.len() - c..]);
        }
        let logits = predictor.next_logits(&windows);
        for (b, &i) in active.iter().enumerate() {
            generated[i].push(argmax_column(&logits, b));
        }
        active.retain(|&i| {
            let g = &generated[i];
            g.len() < items[i].answer.len() && *g.last().expect("nonempty") != terminator
        });
    }
    let correct = items
        .iter()
        .zip(&generated)
        .filter(|(item, g)| &item.answer == *g)
        .count();
    correct as f64 / items.len() as f64
}

/// Exact-match accuracy on the task's held-out lines.
pub fn evaluate<P: Predictor + ?Sized>(predictor: &P, task: &TaskSpec) -> f64 {
    evaluate_items(predictor, &task.eval_items())
}
