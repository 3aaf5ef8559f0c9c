//! Basis-selection compression and the SVD / Fisher-weighted SVD baselines.
//!
//! `compress` runs the full schedule: convert the selected layers, tune with
//! the bases frozen, interleave tuning with mass-based pruning, finalize each
//! layer into two dense layers and finetune the result.

use std::fmt::Write as _;
use std::time::Instant;

use thiserror::Error;

use crate::corpus::TrainSet;
use crate::layer::{DenseLinear, FactorizedLinear, LayerError, LowRankPair};
use crate::linalg::{svd, LinalgError, Matrix};
use crate::model::{block_name, Layer, ToyModel};
use crate::train::{epochs_to_iterations, BatchStream, TrainConfig, TrainError, Trainer};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid compression config: {0}")]
    Config(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("compressed model has no parameters")]
    ZeroParameters,
}

/// Which blocks get compressed.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum LayerSelection {
    #[default]
    All,
    Blocks(Vec<usize>),
}

impl LayerSelection {
    pub fn selects(&self, block: usize) -> bool {
        match self {
            LayerSelection::All => true,
            LayerSelection::Blocks(b) => b.contains(&block),
        }
    }

    pub fn indices(&self, model: &ToyModel) -> Vec<usize> {
        (0..model.blocks.len()).filter(|&i| self.selects(i)).collect()
    }

    /// `all` or a comma-separated list of block indices.
    pub fn parse(s: &str) -> Option<Self> {
        let s = s.trim();
        if s == "all" {
            return Some(LayerSelection::All);
        }
        s.split(',')
            .map(|p| p.trim().parse().ok())
            .collect::<Option<Vec<usize>>>()
            .map(LayerSelection::Blocks)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressionConfig {
    /// Fraction of singular mass left after all pruning rounds, in (0, 1].
    pub keep_ratio: f64,
    pub pruning_times: usize,
    pub keeping_epoch: f64,
    pub pruning_epoch: f64,
    pub post_finetune_epoch: f64,
    /// Number of learnable augmentation pairs per layer (r̃).
    pub additional_dim: usize,
    pub train: TrainConfig,
    pub seed: u64,
    pub selection: LayerSelection,
}

impl Default for CompressionConfig {
    fn default() -> Self {
        Self {
            keep_ratio: 0.25,
            pruning_times: 20,
            keeping_epoch: 1.0,
            pruning_epoch: 3.0,
            post_finetune_epoch: 0.5,
            additional_dim: 8,
            train: TrainConfig::default(),
            seed: 0,
            selection: LayerSelection::All,
        }
    }
}

impl CompressionConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if !(self.keep_ratio > 0.0 && self.keep_ratio <= 1.0) {
            return Err(PipelineError::Config(format!(
                "keep_ratio must lie in (0, 1], got {}",
                self.keep_ratio
            )));
        }
        if self.pruning_times == 0 {
            return Err(PipelineError::Config("pruning_times must be at least 1".into()));
        }
        for (name, v) in [
            ("keeping_epoch", self.keeping_epoch),
            ("pruning_epoch", self.pruning_epoch),
            ("post_finetune_epoch", self.post_finetune_epoch),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(PipelineError::Config(format!("{name} must be a nonnegative number, got {v}")));
            }
        }
        if self.train.batch_size == 0 {
            return Err(PipelineError::Config("batch_size must be positive".into()));
        }
        let lr = self.train.adam.learning_rate;
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(PipelineError::Config(format!("learning_rate must be nonnegative, got {lr}")));
        }
        Ok(())
    }

    /// `keep_ratio^(1 / pruning_times)`.
    pub fn keep_ratio_per_pruning(&self) -> f64 {
        match self.pruning_times {
            1 => self.keep_ratio,
            2 => self.keep_ratio.sqrt(),
            t => self.keep_ratio.powf(1.0 / t as f64),
        }
    }

    /// `round(iterations_per_epoch · pruning_epoch / pruning_times)`, at least 1.
    pub fn iterations_per_pruning(&self, iterations_per_epoch: usize) -> usize {
        let raw = iterations_per_epoch as f64 * self.pruning_epoch / self.pruning_times as f64;
        (raw.round() as usize).max(1)
    }
}

/// Distinct, reproducible seeds for the independent random streams of a run.
pub fn sub_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One layer's part of a pruning round.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerPruneRecord {
    pub layer: String,
    /// Singular weights just before pruning, in layer order.
    pub weights_before: Vec<f64>,
    /// Original basis index of each entry of `weights_before`.
    pub origin_before: Vec<usize>,
    /// Original basis indices that survived.
    pub kept_origin: Vec<usize>,
    pub rank: usize,
    pub kept_fraction: f64,
    /// Product of this layer's kept fractions over all rounds so far.
    pub cumulative_fraction: f64,
}

/// One pruning round across all selected layers.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressionEvent {
    /// 1-based pruning round.
    pub round: usize,
    /// Global optimizer iteration at which the round fired.
    pub iteration: usize,
    /// Mean training loss since the previous round (NaN if no steps ran).
    pub loss: f64,
    pub layers: Vec<LayerPruneRecord>,
    /// Wall-clock seconds since the run started; excluded from equality
    /// checks of logs because it is not reproducible.
    pub elapsed_seconds: f64,
}

impl CompressionEvent {
    /// Equality on everything except wall-clock time, bitwise on floats.
    pub fn same_content(&self, other: &Self) -> bool {
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        self.round == other.round
            && self.iteration == other.iteration
            && self.loss.to_bits() == other.loss.to_bits()
            && self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.layer == b.layer
                    && bits(&a.weights_before) == bits(&b.weights_before)
                    && a.origin_before == b.origin_before
                    && a.kept_origin == b.kept_origin
                    && a.rank == b.rank
                    && a.kept_fraction.to_bits() == b.kept_fraction.to_bits()
                    && a.cumulative_fraction.to_bits() == b.cumulative_fraction.to_bits()
            })
    }
}

pub const EVENT_CSV_HEADER: &str = "round,iteration,layer,rank,kept_fraction,cumulative_fraction,loss";

/// One CSV row per (round, layer).
pub fn events_to_csv(events: &[CompressionEvent]) -> String {
    let mut out = String::from(EVENT_CSV_HEADER);
    out.push('\n');
    for e in events {
        for l in &e.layers {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                e.round, e.iteration, l.layer, l.rank, l.kept_fraction, l.cumulative_fraction, e.loss
            );
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct CompressionOutcome {
    pub model: ToyModel,
    pub events: Vec<CompressionEvent>,
    pub keep_ratio_per_pruning: f64,
    pub iterations_per_pruning: usize,
    /// Bases kept per selected layer after pruning, before finalization.
    pub kept_bases: Vec<(String, usize)>,
}

/// Replaces every selected block by its factorized form.
fn convert_selected(model: &mut ToyModel, selected: &[usize], additional_dim: usize, seed: u64) -> Result<(), LayerError> {
    for &i in selected {
        let (w, b) = model.blocks[i].effective();
        let layer = FactorizedLinear::from_dense(&w, &b, additional_dim, sub_seed(seed, 100 + i as u64))?;
        model.blocks[i] = Layer::Factorized(layer);
    }
    Ok(())
}

/// Swaps every factorized block for its two-layer finalized form.
pub fn finalize_model(model: &mut ToyModel) -> Result<(), LayerError> {
    for block in model.blocks.iter_mut() {
        if let Layer::Factorized(f) = block {
            *block = Layer::LowRank(f.finalize()?);
        }
    }
    Ok(())
}

fn post_finetune(model: ToyModel, set: &TrainSet, config: &CompressionConfig) -> Result<ToyModel, PipelineError> {
    let mut trainer = Trainer::new(model, set, config.train, sub_seed(config.seed, 3))?;
    let iters = epochs_to_iterations(config.post_finetune_epoch, trainer.stream.iterations_per_epoch());
    trainer.run(iters)?;
    Ok(trainer.model)
}

fn prune_round(
    trainer: &mut Trainer<'_>,
    selected: &[usize],
    ratio: f64,
    cumulative: &mut [f64],
) -> Result<Vec<LayerPruneRecord>, PipelineError> {
    let mut records = Vec::with_capacity(selected.len());
    for (k, &i) in selected.iter().enumerate() {
        let Layer::Factorized(layer) = &mut trainer.model.blocks[i] else {
            unreachable!("selected blocks are factorized during pruning");
        };
        let weights_before = layer.weights().to_vec();
        let origin_before = layer.origin().to_vec();
        let out = layer.prune_by_mass(ratio)?;
        cumulative[k] *= out.kept_fraction;
        trainer
            .optimizer
            .retain(&format!("{}.s", block_name(i)), &out.kept_positions);
        records.push(LayerPruneRecord {
            layer: block_name(i),
            weights_before,
            origin_before,
            rank: out.kept_origin.len(),
            kept_origin: out.kept_origin,
            kept_fraction: out.kept_fraction,
            cumulative_fraction: cumulative[k],
        });
    }
    Ok(records)
}

/// Runs the full basis-selection schedule on `model` using `set` as the
/// target-task data.
///
/// Pruning rounds fire every `iterations_per_pruning` iterations of the
/// pruning phase; rounds the phase is too short to reach are applied at its
/// end, so exactly `pruning_times` rounds always run.
pub fn compress(model: &ToyModel, set: &TrainSet, config: &CompressionConfig) -> Result<CompressionOutcome, PipelineError> {
    config.validate()?;
    let start = Instant::now();
    let selected = config.selection.indices(model);
    let mut model = model.clone();
    convert_selected(&mut model, &selected, config.additional_dim, config.seed)?;

    let mut trainer = Trainer::new(model, set, config.train, sub_seed(config.seed, 1))?;
    let ipe = trainer.stream.iterations_per_epoch();
    trainer.run(epochs_to_iterations(config.keeping_epoch, ipe))?;

    let ratio = config.keep_ratio_per_pruning();
    let ipp = config.iterations_per_pruning(ipe);
    let total = epochs_to_iterations(config.pruning_epoch, ipe);
    let mut cumulative = vec![1.0; selected.len()];
    let mut events = Vec::with_capacity(config.pruning_times);
    let (mut loss_sum, mut loss_count) = (0.0, 0usize);
    let mut fire = |trainer: &mut Trainer<'_>, loss_sum: &mut f64, loss_count: &mut usize, events: &mut Vec<CompressionEvent>| {
        let layers = prune_round(trainer, &selected, ratio, &mut cumulative)?;
        events.push(CompressionEvent {
            round: events.len() + 1,
            iteration: trainer.iteration,
            loss: if *loss_count > 0 { *loss_sum / *loss_count as f64 } else { f64::NAN },
            layers,
            elapsed_seconds: start.elapsed().as_secs_f64(),
        });
        *loss_sum = 0.0;
        *loss_count = 0;
        Ok::<(), PipelineError>(())
    };
    for it in 1..=total {
        loss_sum += trainer.step()?;
        loss_count += 1;
        if it % ipp == 0 && events.len() < config.pruning_times {
            fire(&mut trainer, &mut loss_sum, &mut loss_count, &mut events)?;
        }
    }
    while events.len() < config.pruning_times {
        fire(&mut trainer, &mut loss_sum, &mut loss_count, &mut events)?;
    }

    let kept_bases = selected
        .iter()
        .map(|&i| match &trainer.model.blocks[i] {
            Layer::Factorized(f) => (block_name(i), f.rank()),
            _ => unreachable!("selected blocks are factorized until finalization"),
        })
        .collect();
    let mut model = trainer.model;
    finalize_model(&mut model)?;
    let model = post_finetune(model, set, config)?;
    Ok(CompressionOutcome {
        model,
        events,
        keep_ratio_per_pruning: ratio,
        iterations_per_pruning: ipp,
        kept_bases,
    })
}

/// How many of the original singular values the SVD baseline keeps.
#[derive(Debug, Clone, PartialEq)]
pub enum Truncation {
    /// Same rank for every selected layer.
    Rank(usize),
    /// One rank per selected layer, in block order.
    Ranks(Vec<usize>),
    /// Shortest top prefix holding this fraction of the singular mass.
    MassRatio(f64),
}

impl Truncation {
    fn rank_for(&self, k: usize) -> Option<usize> {
        match self {
            Truncation::Rank(r) => Some(*r),
            Truncation::Ranks(rs) => rs.get(k).copied(),
            Truncation::MassRatio(_) => None,
        }
    }

    fn validate(&self, layers: usize) -> Result<(), PipelineError> {
        match self {
            Truncation::Rank(0) => Err(PipelineError::Config("target rank must be positive".into())),
            Truncation::Ranks(rs) if rs.len() != layers => Err(PipelineError::Config(format!(
                "{} target ranks for {layers} selected layers",
                rs.len()
            ))),
            Truncation::Ranks(rs) if rs.contains(&0) => Err(PipelineError::Config("target rank must be positive".into())),
            Truncation::MassRatio(r) if !(*r > 0.0 && *r <= 1.0) => {
                Err(PipelineError::Config(format!("mass ratio must lie in (0, 1], got {r}")))
            }
            _ => Ok(()),
        }
    }
}

/// Kept original basis indices of each selected layer under `target`,
/// without any training.
pub fn svd_truncation_sets(model: &ToyModel, target: &Truncation, selection: &LayerSelection) -> Result<Vec<Vec<usize>>, PipelineError> {
    let selected = selection.indices(model);
    target.validate(selected.len())?;
    selected
        .iter()
        .enumerate()
        .map(|(k, &i)| {
            let mut layer = truncated_layer(&model.blocks[i], target, k)?;
            Ok(std::mem::take(&mut layer.origin))
        })
        .collect()
}

fn truncated_layer(block: &Layer, target: &Truncation, k: usize) -> Result<FactorizedLinear, PipelineError> {
    let (w, b) = block.effective();
    let mut layer = FactorizedLinear::from_dense(&w, &b, 0, 0)?;
    match target {
        Truncation::MassRatio(r) => {
            layer.prune_by_mass(*r)?;
        }
        _ => {
            let rank = target.rank_for(k).expect("validated").min(layer.rank());
            layer.retain(&(0..rank).collect::<Vec<_>>());
        }
    }
    Ok(layer)
}

/// One-shot truncated SVD of every selected layer, finalized and finetuned
/// like `compress`.
pub fn baseline_svd_truncate(
    model: &ToyModel,
    set: &TrainSet,
    target: &Truncation,
    config: &CompressionConfig,
) -> Result<ToyModel, PipelineError> {
    config.validate()?;
    let selected = config.selection.indices(model);
    target.validate(selected.len())?;
    let mut out = model.clone();
    for (k, &i) in selected.iter().enumerate() {
        let layer = truncated_layer(&model.blocks[i], target, k)?;
        out.blocks[i] = Layer::LowRank(layer.finalize()?);
    }
    post_finetune(out, set, config)
}

/// Row importance of each selected layer: per output row, the sum over
/// `batches` minibatches of squared loss gradients of that row's weights.
pub fn fisher_row_importance(
    model: &ToyModel,
    set: &TrainSet,
    selected: &[usize],
    batches: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>, PipelineError> {
    let mut dense = model.clone();
    for &i in selected {
        let (w, b) = dense.blocks[i].effective();
        dense.blocks[i] = Layer::Dense(DenseLinear::new(w, Some(b))?);
    }
    let names = dense.param_names();
    let index: Vec<usize> = selected
        .iter()
        .map(|&i| {
            let want = format!("{}.weight", block_name(i));
            names.iter().position(|n| *n == want).expect("dense block has a weight")
        })
        .collect();
    let mut importance: Vec<Vec<f64>> = selected.iter().map(|&i| vec![0.0; dense.blocks[i].out_features()]).collect();
    let mut stream = BatchStream::new(set, batch_size, seed)?;
    for _ in 0..batches {
        let (windows, targets) = stream.next_batch();
        let (_, grads) = dense.loss_and_grad(&windows, &targets)?;
        for (k, &i) in selected.iter().enumerate() {
            let cols = dense.blocks[i].in_features();
            for (row, acc) in importance[k].iter_mut().enumerate() {
                *acc += grads[index[k]][row * cols..(row + 1) * cols].iter().map(|g| g * g).sum::<f64>();
            }
        }
    }
    Ok(importance)
}

/// Zero or non-finite entries become the smallest positive estimate
/// (all-zero falls back to uniform importance).
fn floor_importance(importance: &mut [f64]) {
    let floor = importance
        .iter()
        .copied()
        .filter(|x| x.is_finite() && *x > 0.0)
        .fold(f64::INFINITY, f64::min);
    let floor = if floor.is_finite() { floor } else { 1.0 };
    for x in importance.iter_mut() {
        if !(x.is_finite() && *x > 0.0) {
            *x = floor;
        }
    }
}

/// Rank-`rank` approximation of `w` minimizing `Σᵢ Iᵢ ‖wᵢ − ŵᵢ‖²` over rows,
/// as two dense factors: first `S_k V_kᵀ` (k×m), second `D⁻¹ U_k` (n×k),
/// with `D = diag(√I)` and `D w = U S Vᵀ`.
pub fn weighted_low_rank(w: &Matrix, importance: &[f64], rank: usize, bias: Vec<f64>) -> Result<LowRankPair, PipelineError> {
    let mut importance = importance.to_vec();
    floor_importance(&mut importance);
    let root: Vec<f64> = importance.iter().map(|x| x.sqrt()).collect();
    let f = svd(&w.scale_rows(&root)?)?;
    let k = rank.min(f.rank());
    let first = f.v.leading_columns(k).scale_columns(&f.s[..k])?.transpose();
    let inv: Vec<f64> = root.iter().map(|r| 1.0 / r).collect();
    let second = f.u.leading_columns(k).scale_rows(&inv)?;
    Ok(LowRankPair {
        first: DenseLinear::new(first, None)?,
        second: DenseLinear::new(second, Some(bias))?,
    })
}

/// Fisher-weighted SVD baseline: row importances from squared gradients on
/// one epoch of target data, weighted truncation, then the same
/// finalization and post-finetuning as `compress`.
pub fn baseline_fwsvd(
    model: &ToyModel,
    set: &TrainSet,
    target: &Truncation,
    config: &CompressionConfig,
) -> Result<ToyModel, PipelineError> {
    config.validate()?;
    let selected = config.selection.indices(model);
    target.validate(selected.len())?;
    if matches!(target, Truncation::MassRatio(_)) {
        return Err(PipelineError::Config("fwsvd needs explicit target ranks".into()));
    }
    let batches = BatchStream::new(set, config.train.batch_size, 0)?.iterations_per_epoch();
    let importance = fisher_row_importance(model, set, &selected, batches, config.train.batch_size, sub_seed(config.seed, 5))?;
    let mut out = model.clone();
    for (k, &i) in selected.iter().enumerate() {
        let (w, b) = model.blocks[i].effective();
        let rank = target.rank_for(k).expect("validated");
        out.blocks[i] = Layer::LowRank(weighted_low_rank(&w, &importance[k], rank, b)?);
    }
    post_finetune(out, set, config)
}

/// Original learnable parameter count over compressed learnable parameter count.
pub fn compression_ratio(original: &ToyModel, compressed: &ToyModel) -> Result<f64, PipelineError> {
    let denom = compressed.param_count();
    if denom == 0 {
        return Err(PipelineError::ZeroParameters);
    }
    Ok(original.param_count() as f64 / denom as f64)
}

/// Stored rank of every selected block (r' for finalized pairs).
pub fn layer_ranks(model: &ToyModel) -> Vec<usize> {
    model.blocks.iter().map(Layer::stored_rank).collect()
}
