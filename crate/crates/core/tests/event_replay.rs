//! Replays a compression log through an offline prefix-sum simulator.

use basis_select::corpus::{make_corpora, CorpusSizes, TrainSet};
use basis_select::model::{ModelConfig, ToyModel};
use basis_select::train::BatchStream;
use basis_select::pipeline::{compress, events_to_csv, CompressionConfig, EVENT_CSV_HEADER};

/// Sort by descending magnitude (ties: smaller original index), take the
/// shortest prefix whose running sum reaches `ratio` of the full sum.
fn simulate(weights: &[f64], origin: &[usize], ratio: f64) -> Vec<usize> {
    let mut pairs: Vec<(f64, usize)> = weights.iter().map(|w| w.abs()).zip(origin.iter().copied()).collect();
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let prefix: Vec<f64> = pairs
        .iter()
        .scan(0.0, |acc, p| {
            *acc += p.0;
            Some(*acc)
        })
        .collect();
    let total = *prefix.last().unwrap();
    let k = if ratio >= 1.0 {
        pairs.len()
    } else {
        prefix.iter().position(|&s| s >= ratio * total).map_or(pairs.len(), |i| i + 1).max(1)
    };
    let mut kept: Vec<usize> = pairs[..k].iter().map(|p| p.1).collect();
    kept.sort_unstable();
    kept
}

fn setup() -> (ToyModel, TrainSet) {
    let config = ModelConfig {
        embed_dim: 8,
        hidden: 24,
        blocks: 2,
        ..ModelConfig::default()
    };
    let corpora = make_corpora(3, CorpusSizes::default());
    let set = TrainSet::from_lines(&corpora.patterns.train[..300], config.context);
    (ToyModel::new(config, 4), set)
}

#[test]
fn every_round_matches_the_simulator() {
    let (model, set) = setup();
    let config = CompressionConfig {
        keep_ratio: 0.3,
        pruning_times: 6,
        keeping_epoch: 0.5,
        pruning_epoch: 1.0,
        post_finetune_epoch: 0.0,
        additional_dim: 2,
        seed: 8,
        ..CompressionConfig::default()
    };
    let out = compress(&model, &set, &config).unwrap();
    assert_eq!(out.events.len(), 6);
    let ratio = out.keep_ratio_per_pruning;
    let mut previous: Vec<Option<Vec<usize>>> = vec![None; 2];
    for (round, e) in out.events.iter().enumerate() {
        assert_eq!(e.round, round + 1);
        for (k, layer) in e.layers.iter().enumerate() {
            if let Some(prev) = &previous[k] {
                let mut sorted = layer.origin_before.clone();
                sorted.sort_unstable();
                assert_eq!(&sorted, prev, "round {} starts from the previous survivors", e.round);
            }
            let want = simulate(&layer.weights_before, &layer.origin_before, ratio);
            let mut got = layer.kept_origin.clone();
            got.sort_unstable();
            assert_eq!(got, want, "round {} {}", e.round, layer.layer);
            assert!(layer.kept_fraction >= ratio);
            previous[k] = Some(got);
        }
    }
    let final_ranks: Vec<usize> = out.kept_bases.iter().map(|(_, r)| *r).collect();
    let last: Vec<usize> = out.events.last().unwrap().layers.iter().map(|l| l.rank).collect();
    assert_eq!(final_ranks, last);

    let csv = events_to_csv(&out.events);
    assert!(csv.starts_with(EVENT_CSV_HEADER));
    assert_eq!(csv.lines().count(), 1 + 6 * 2);
}

#[test]
fn rounds_fire_on_schedule() {
    let (model, set) = setup();
    let config = CompressionConfig {
        keep_ratio: 0.5,
        pruning_times: 4,
        keeping_epoch: 0.0,
        pruning_epoch: 1.0,
        post_finetune_epoch: 0.0,
        additional_dim: 0,
        seed: 1,
        ..CompressionConfig::default()
    };
    let out = compress(&model, &set, &config).unwrap();
    let ipp = out.iterations_per_pruning;
    let total = BatchStream::new(&set, config.train.batch_size, 0).unwrap().iterations_per_epoch();
    // Rounds the phase is too short to reach fire at its last iteration.
    let want: Vec<usize> = (1..=4).map(|k| (k * ipp).min(total)).collect();
    let iterations: Vec<usize> = out.events.iter().map(|e| e.iteration).collect();
    assert_eq!(iterations, want);
}

#[test]
fn same_seed_same_log() {
    let (model, set) = setup();
    let config = CompressionConfig {
        keep_ratio: 0.2,
        pruning_times: 3,
        keeping_epoch: 0.2,
        pruning_epoch: 0.3,
        post_finetune_epoch: 0.1,
        additional_dim: 1,
        seed: 5,
        ..CompressionConfig::default()
    };
    let a = compress(&model, &set, &config).unwrap();
    let b = compress(&model, &set, &config).unwrap();
    assert_eq!(a.model, b.model);
    assert!(a.events.iter().zip(&b.events).all(|(x, y)| x.same_content(y)));
}
