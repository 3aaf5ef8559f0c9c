//! Experiment grids: finetune a pretrained model on the target task, compress
//! it with one of the methods, post-finetune, evaluate, one report row per
//! grid point.

use std::collections::HashMap;
use std::time::Instant;

use crate::corpus::{Corpora, Domain, TrainSet};
use crate::model::ToyModel;
use crate::pipeline::{
    baseline_fwsvd, baseline_svd_truncate, compress, compression_ratio, sub_seed, CompressionConfig, PipelineError,
    Truncation,
};
use crate::report::{RunReport, RunRow};
use crate::train::{evaluate, finetune, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    BasisSelection,
    Svd,
    Fwsvd,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::BasisSelection, Method::Svd, Method::Fwsvd];

    pub fn name(self) -> &'static str {
        match self {
            Method::BasisSelection => "basis-selection",
            Method::Svd => "svd",
            Method::Fwsvd => "fwsvd",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridPoint {
    pub method: Method,
    pub config: CompressionConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSettings {
    pub target: Domain,
    /// Epochs of target-task finetuning before compression.
    pub finetune_epoch: f64,
    pub train: TrainConfig,
}

impl Default for ExperimentSettings {
    fn default() -> Self {
        Self {
            target: Domain::Patterns,
            finetune_epoch: 3.0,
            train: TrainConfig::default(),
        }
    }
}

/// Keep ratios of the main grid, mildest first.
pub const MAIN_KEEP_RATIOS: [f64; 3] = [0.3, 0.12, 0.04];
/// Keep ratios of the additional-dimension ablation. The 32 extra pairs
/// alone cap the ratio near 4×, hence the small last entry.
pub const DIM_ABLATION_KEEP_RATIOS: [f64; 3] = [0.3, 0.12, 0.01];
/// Keep ratios of the pruning-times ablation. A round prunes nothing once
/// every basis outweighs `1 − keep_ratio^(1/100)` of the mass, so 100
/// rounds need tiny keep ratios to get beyond 10×.
pub const PRUNING_ABLATION_KEEP_RATIOS: [f64; 3] = [0.1, 1e-5, 1e-7];
pub const PRESETS: [&str; 3] = ["main", "ablation-additional-dim", "ablation-pruning-times"];

/// Grid of a named preset, built on top of `base` for every seed.
///
/// - `main`: all three methods over `MAIN_KEEP_RATIOS`.
/// - `ablation-additional-dim`: basis selection with r̃ ∈ {0, 32}.
/// - `ablation-pruning-times`: basis selection with 2 vs 100 rounds, r̃ = 0.
pub fn preset(name: &str, base: &CompressionConfig, seeds: &[u64]) -> Option<Vec<GridPoint>> {
    let point = |method, seed, keep_ratio, f: &dyn Fn(&mut CompressionConfig)| {
        let mut config = CompressionConfig {
            keep_ratio,
            seed,
            ..base.clone()
        };
        f(&mut config);
        GridPoint { method, config }
    };
    let mut grid = Vec::new();
    match name {
        "main" => {
            for &seed in seeds {
                for kr in MAIN_KEEP_RATIOS {
                    for method in Method::ALL {
                        grid.push(point(method, seed, kr, &|_| {}));
                    }
                }
            }
        }
        "ablation-additional-dim" => {
            for &seed in seeds {
                for kr in DIM_ABLATION_KEEP_RATIOS {
                    for dim in [0, 32] {
                        grid.push(point(Method::BasisSelection, seed, kr, &|c| c.additional_dim = dim));
                    }
                }
            }
        }
        "ablation-pruning-times" => {
            for &seed in seeds {
                for kr in PRUNING_ABLATION_KEEP_RATIOS {
                    for times in [2, 100] {
                        grid.push(point(Method::BasisSelection, seed, kr, &|c| {
                            c.pruning_times = times;
                            c.additional_dim = 0;
                        }));
                    }
                }
            }
        }
        _ => return None,
    }
    Some(grid)
}

/// Everything in a config that determines a basis-selection result.
fn bs_key(c: &CompressionConfig) -> String {
    format!("{c:?}")
}

/// Runs every grid point against `pretrained`. Target finetuning is done
/// once per seed and shared by all points with that seed. The SVD and FWSVD
/// baselines use the per-layer ranks basis selection reached with the same
/// config, so every method is compared at the same parameter budget.
pub fn run_experiment(
    pretrained: &ToyModel,
    corpora: &Corpora,
    settings: &ExperimentSettings,
    grid: &[GridPoint],
) -> Result<RunReport, PipelineError> {
    let task = corpora.task(settings.target);
    let set = TrainSet::from_lines(&task.train, pretrained.config.context);
    let mut finetuned: HashMap<u64, ToyModel> = HashMap::new();
    let mut bs_ranks: HashMap<String, Vec<usize>> = HashMap::new();
    let mut rows = Vec::with_capacity(grid.len());

    for point in grid {
        let c = &point.config;
        c.validate()?;
        if !finetuned.contains_key(&c.seed) {
            let (m, _) = finetune(pretrained.clone(), task, settings.finetune_epoch, settings.train, sub_seed(c.seed, 7))?;
            finetuned.insert(c.seed, m);
        }
        let base = &finetuned[&c.seed];
        let selected = c.selection.indices(base);
        let selected_ranks = |m: &ToyModel| selected.iter().map(|&i| m.blocks[i].stored_rank()).collect::<Vec<_>>();

        let key = bs_key(c);
        if point.method != Method::BasisSelection && !bs_ranks.contains_key(&key) {
            let out = compress(base, &set, c)?;
            bs_ranks.insert(key.clone(), selected_ranks(&out.model));
        }

        let start = Instant::now();
        let model = match point.method {
            Method::BasisSelection => {
                let out = compress(base, &set, c)?;
                bs_ranks.insert(key, selected_ranks(&out.model));
                out.model
            }
            Method::Svd => baseline_svd_truncate(base, &set, &Truncation::Ranks(bs_ranks[&key].clone()), c)?,
            Method::Fwsvd => baseline_fwsvd(base, &set, &Truncation::Ranks(bs_ranks[&key].clone()), c)?,
        };
        let accuracy = evaluate(&model, task);
        rows.push(RunRow {
            method: point.method.name().to_string(),
            seed: c.seed,
            keep_ratio: c.keep_ratio,
            pruning_times: c.pruning_times,
            additional_dim: c.additional_dim,
            compression_ratio: compression_ratio(pretrained, &model)?,
            rank_per_layer: selected_ranks(&model),
            target_task: task.name.clone(),
            accuracy,
            wall_seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(RunReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(Method::parse(m.name()), Some(m));
        }
        assert_eq!(Method::parse("lora"), None);
    }

    #[test]
    fn presets_cover_their_variants() {
        let base = CompressionConfig::default();
        let grid = preset("ablation-additional-dim", &base, &[1, 2]).unwrap();
        assert_eq!(grid.len(), 2 * DIM_ABLATION_KEEP_RATIOS.len() * 2);
        assert!(grid.iter().all(|p| [0, 32].contains(&p.config.additional_dim)));
        let grid = preset("ablation-pruning-times", &base, &[1]).unwrap();
        for kr in PRUNING_ABLATION_KEEP_RATIOS {
            let times: Vec<usize> = grid
                .iter()
                .filter(|p| p.config.keep_ratio == kr)
                .map(|p| p.config.pruning_times)
                .collect();
            assert_eq!(times, vec![2, 100]);
        }
        let grid = preset("main", &base, &[4]).unwrap();
        assert_eq!(grid.len(), 3 * MAIN_KEEP_RATIOS.len());
        assert!(grid.iter().all(|p| p.config.seed == 4));
        assert!(preset("nope", &base, &[1]).is_none());
    }

    #[test]
    fn empty_grid_gives_empty_report() {
        let corpora = crate::corpus::make_corpora(0, crate::corpus::CorpusSizes::default());
        let model = ToyModel::new(Default::default(), 0);
        let report = run_experiment(&model, &corpora, &ExperimentSettings::default(), &[]).unwrap();
        assert!(report.rows.is_empty());
        assert_eq!(report.to_csv().trim(), crate::report::HEADER);
    }
}
