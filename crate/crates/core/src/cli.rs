//! `bsel` command line. Exit codes: 0 success, 1 runtime failure, 2 usage
//! or configuration error.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::{load_checkpoint, save_checkpoint, write_atomic};
use crate::config::{parse_pairs, RunConfig};
use crate::corpus::{make_corpora, Corpora, CorpusSizes, Domain, TrainSet};
use crate::experiment::{preset, run_experiment, GridPoint, Method};
use crate::inspect::inspect_basis;
use crate::model::{ModelConfig, ToyModel};
use crate::pipeline::{
    baseline_fwsvd, baseline_svd_truncate, compress, compression_ratio, events_to_csv, layer_ranks,
    svd_truncation_sets, sub_seed, Truncation,
};
use crate::report::{merge, render_table, summarize, RunReport};
use crate::train::{evaluate, finetune, pretrain};

#[derive(Debug, Parser)]
#[command(name = "bsel", version, about = "Basis-selection low-rank compression of a toy next-token model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a fresh model on the mixed corpus and save it.
    Pretrain(Common),
    /// Finetune a checkpoint on the target task.
    Finetune(Common),
    /// Compress a checkpoint with one method and save the result.
    Compress(Common),
    /// Exact-match accuracy of a checkpoint on both tasks.
    Eval(Common),
    /// Run a grid of compressions and write a run report.
    Experiment(Common),
    /// List the tokens each basis of a layer promotes.
    Inspect(Common),
    /// Merge run reports and print the accuracy-vs-ratio table.
    Report {
        /// Run report CSV files.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Directory for merged.csv and table.txt.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Flags shared by the model subcommands; each overrides the config key of
/// the same name (dashes become underscores).
#[derive(Debug, Args)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    keep_ratio: Option<String>,
    #[arg(long)]
    pruning_times: Option<String>,
    #[arg(long)]
    keeping_epoch: Option<String>,
    #[arg(long)]
    pruning_epoch: Option<String>,
    #[arg(long)]
    post_finetune_epoch: Option<String>,
    #[arg(long)]
    additional_dim: Option<String>,
    /// Run seed (default from BS_SEED, else 0).
    #[arg(long)]
    seed: Option<String>,
    /// basis-selection, svd or fwsvd.
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    checkpoint: Option<String>,
    #[arg(long)]
    out: Option<String>,
    /// main, ablation-additional-dim or ablation-pruning-times.
    #[arg(long)]
    preset: Option<String>,
    /// arithmetic or patterns.
    #[arg(long)]
    target: Option<String>,
    /// Comma-separated experiment seeds.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    layer: Option<String>,
    #[arg(long)]
    top_k: Option<String>,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(String),
}

fn runtime<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Runtime(e.to_string())
}

impl Common {
    fn resolve(&self) -> Result<RunConfig, Failure> {
        let usage = |e: crate::config::ConfigError| Failure::Usage(e.to_string());
        let mut config = RunConfig::from_env().map_err(usage)?;
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path)
                .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
            config.apply(&parse_pairs(&text).map_err(usage)?).map_err(usage)?;
        }
        let flags = [
            ("keep_ratio", &self.keep_ratio),
            ("pruning_times", &self.pruning_times),
            ("keeping_epoch", &self.keeping_epoch),
            ("pruning_epoch", &self.pruning_epoch),
            ("post_finetune_epoch", &self.post_finetune_epoch),
            ("additional_dim", &self.additional_dim),
            ("seed", &self.seed),
            ("method", &self.method),
            ("checkpoint", &self.checkpoint),
            ("out", &self.out),
            ("preset", &self.preset),
            ("target", &self.target),
            ("seeds", &self.seeds),
            ("layer", &self.layer),
            ("top_k", &self.top_k),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                config.set(key, v).map_err(usage)?;
            }
        }
        config.validate().map_err(usage)?;
        Ok(config)
    }
}

fn corpora(config: &RunConfig) -> Corpora {
    make_corpora(config.corpus_seed, CorpusSizes::default())
}

fn require<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, Failure> {
    p.as_deref().ok_or_else(|| Failure::Usage(format!("--{flag} is required")))
}

fn load(config: &RunConfig) -> Result<ToyModel, Failure> {
    let path = require(&config.checkpoint, "checkpoint")?;
    load_checkpoint(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn ensure_parent(path: &Path) -> Result<(), Failure> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => fs::create_dir_all(p).map_err(runtime),
        _ => Ok(()),
    }
}

fn save(path: &Path, model: &ToyModel) -> Result<(), Failure> {
    ensure_parent(path)?;
    save_checkpoint(path, model).map_err(runtime)
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    ensure_parent(path)?;
    write_atomic(path, text.as_bytes()).map_err(runtime)
}

fn print_accuracies(model: &ToyModel, corpora: &Corpora) {
    for d in [Domain::Arithmetic, Domain::Patterns] {
        println!("accuracy {} {:.4}", d.name(), evaluate(model, corpora.task(d)));
    }
}

fn cmd_pretrain(c: &RunConfig) -> Result<(), Failure> {
    let out = require(&c.out, "out")?;
    let corpora = corpora(c);
    let model = ToyModel::new(ModelConfig::default(), c.compression.seed);
    let (model, curve) = pretrain(model, &corpora.pretrain, c.pretrain_epoch, c.compression.train, sub_seed(c.compression.seed, 11))
        .map_err(runtime)?;
    if let Some(l) = curve.last() {
        println!("iterations {} final_loss {l:.5}", curve.len());
    }
    print_accuracies(&model, &corpora);
    save(out, &model)
}

fn cmd_finetune(c: &RunConfig) -> Result<(), Failure> {
    let out = require(&c.out, "out")?;
    let model = load(c)?;
    let corpora = corpora(c);
    let task = corpora.task(c.target);
    let (model, curve) =
        finetune(model, task, c.finetune_epoch, c.compression.train, sub_seed(c.compression.seed, 7)).map_err(runtime)?;
    if let Some(l) = curve.last() {
        println!("iterations {} final_loss {l:.5}", curve.len());
    }
    println!("accuracy {} {:.4}", task.name, evaluate(&model, task));
    save(out, &model)
}

fn cmd_compress(c: &RunConfig) -> Result<(), Failure> {
    let out = require(&c.out, "out")?;
    let cc = &c.compression;
    if c.method == Method::BasisSelection {
        println!("keep_ratio_per_pruning {}", cc.keep_ratio_per_pruning());
    }
    let original = load(c)?;
    let corpora = corpora(c);
    let task = corpora.task(c.target);
    let set = TrainSet::from_lines(&task.train, original.config.context);
    let model = match c.method {
        Method::BasisSelection => {
            let outcome = compress(&original, &set, cc).map_err(runtime)?;
            println!("iterations_per_pruning {}", outcome.iterations_per_pruning);
            for (layer, kept) in &outcome.kept_bases {
                println!("kept_bases {layer} {kept}");
            }
            write_text(&out.with_extension("events.csv"), &events_to_csv(&outcome.events))?;
            outcome.model
        }
        Method::Svd => {
            baseline_svd_truncate(&original, &set, &Truncation::MassRatio(cc.keep_ratio), cc).map_err(runtime)?
        }
        Method::Fwsvd => {
            let ranks = svd_truncation_sets(&original, &Truncation::MassRatio(cc.keep_ratio), &cc.selection)
                .map_err(runtime)?
                .iter()
                .map(Vec::len)
                .collect();
            baseline_fwsvd(&original, &set, &Truncation::Ranks(ranks), cc).map_err(runtime)?
        }
    };
    let ranks: Vec<String> = layer_ranks(&model).iter().map(|r| r.to_string()).collect();
    println!("rank_per_layer {}", ranks.join(";"));
    println!("compression_ratio {:.4}", compression_ratio(&original, &model).map_err(runtime)?);
    println!("accuracy {} {:.4}", task.name, evaluate(&model, task));
    save(out, &model)
}

fn cmd_eval(c: &RunConfig) -> Result<(), Failure> {
    let model = load(c)?;
    println!("parameters {}", model.param_count());
    print_accuracies(&model, &corpora(c));
    Ok(())
}

fn cmd_experiment(c: &RunConfig) -> Result<(), Failure> {
    let out = require(&c.out, "out")?;
    let grid = match &c.preset {
        Some(name) => preset(name, &c.compression, &c.seeds).expect("validated preset"),
        None => c
            .seeds
            .iter()
            .map(|&seed| GridPoint {
                method: c.method,
                config: crate::pipeline::CompressionConfig {
                    seed,
                    ..c.compression.clone()
                },
            })
            .collect(),
    };
    let pretrained = load(c)?;
    fs::create_dir_all(out).map_err(runtime)?;
    write_text(&out.join("effective_config.txt"), &c.to_text())?;
    let report = run_experiment(&pretrained, &corpora(c), &c.settings(), &grid).map_err(runtime)?;
    write_text(&out.join("run_report.csv"), &report.to_csv())?;
    print!("{}", render_table(&summarize(&report)));
    Ok(())
}

fn cmd_inspect(c: &RunConfig) -> Result<(), Failure> {
    let model = load(c)?;
    let bases = inspect_basis(&model, &c.layer, c.top_k).map_err(runtime)?;
    for b in bases {
        let tokens: Vec<String> = b
            .tokens
            .iter()
            .map(|&(t, _)| crate::corpus::decode(&[t]))
            .map(|s| if s == "." { "<pad>".to_string() } else { s })
            .collect();
        println!("basis {:>4} weight {:>10.4} tokens {}", b.origin, b.weight, tokens.join(" "));
    }
    Ok(())
}

fn cmd_report(inputs: &[PathBuf], out: Option<&Path>) -> Result<(), Failure> {
    let mut reports = Vec::with_capacity(inputs.len());
    for path in inputs {
        let text = fs::read_to_string(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
        reports.push(RunReport::from_csv(&text).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?);
    }
    let merged = merge(&reports);
    let table = render_table(&summarize(&merged));
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(runtime)?;
        write_text(&dir.join("merged.csv"), &merged.to_csv())?;
        write_text(&dir.join("table.txt"), &table)?;
    }
    print!("{table}");
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    let run = |common: &Common, f: fn(&RunConfig) -> Result<(), Failure>| f(&common.resolve()?);
    match &cli.command {
        Command::Pretrain(c) => run(c, cmd_pretrain),
        Command::Finetune(c) => run(c, cmd_finetune),
        Command::Compress(c) => run(c, cmd_compress),
        Command::Eval(c) => run(c, cmd_eval),
        Command::Experiment(c) => run(c, cmd_experiment),
        Command::Inspect(c) => run(c, cmd_inspect),
        Command::Report { inputs, out } => cmd_report(inputs, out.as_deref()),
    }
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            2
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            1
        }
    }
}
