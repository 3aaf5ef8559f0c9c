//! Flat `key = value` run configuration. Precedence, lowest first: built-in
//! defaults, the `BS_SEED` environment variable (seed only), the config
//! file, command-line flags.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use thiserror::Error;

use crate::corpus::Domain;
use crate::experiment::{ExperimentSettings, Method};
use crate::pipeline::{CompressionConfig, LayerSelection};

pub const SEED_ENV: &str = "BS_SEED";

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("bad value for {key}: {message}")]
    Value { key: String, message: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub compression: CompressionConfig,
    pub method: Method,
    pub target: Domain,
    pub pretrain_epoch: f64,
    pub finetune_epoch: f64,
    /// Seed of the generated corpora; kept apart from the run seed so all
    /// runs of an experiment see the same data.
    pub corpus_seed: u64,
    /// Seeds of an experiment grid.
    pub seeds: Vec<u64>,
    pub preset: Option<String>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Layer examined by `inspect`.
    pub layer: String,
    pub top_k: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            compression: CompressionConfig::default(),
            method: Method::BasisSelection,
            target: Domain::Patterns,
            pretrain_epoch: 10.0,
            finetune_epoch: 3.0,
            corpus_seed: 0,
            seeds: vec![1, 2, 3],
            preset: None,
            checkpoint: None,
            out: None,
            layer: "blocks.2".into(),
            top_k: 10,
        }
    }
}

pub const KEYS: [&str; 21] = [
    "keep_ratio",
    "pruning_times",
    "keeping_epoch",
    "pruning_epoch",
    "post_finetune_epoch",
    "additional_dim",
    "seed",
    "method",
    "checkpoint",
    "out",
    "preset",
    "target",
    "pretrain_epoch",
    "finetune_epoch",
    "corpus_seed",
    "seeds",
    "learning_rate",
    "batch_size",
    "layers",
    "layer",
    "top_k",
];

/// Parses `key = value` lines; blank lines and `#` comments are skipped.
/// Later duplicates win.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>, ConfigError> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            });
        };
        let k = k.trim();
        if k.is_empty() {
            return Err(ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            });
        }
        out.insert(k.to_string(), v.trim().to_string());
    }
    Ok(out)
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::Value {
        key: key.into(),
        message: format!("cannot parse {value:?}"),
    })
}

impl RunConfig {
    /// Defaults with the seed taken from `BS_SEED` when set.
    pub fn from_env() -> Result<Self, ConfigError> {
        let mut c = Self::default();
        if let Ok(v) = std::env::var(SEED_ENV) {
            c.compression.seed = parse(SEED_ENV, &v)?;
        }
        Ok(c)
    }

    /// Applies one key. Range checks happen in `validate`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let c = &mut self.compression;
        match key {
            "keep_ratio" => c.keep_ratio = parse(key, value)?,
            "pruning_times" => c.pruning_times = parse(key, value)?,
            "keeping_epoch" => c.keeping_epoch = parse(key, value)?,
            "pruning_epoch" => c.pruning_epoch = parse(key, value)?,
            "post_finetune_epoch" => c.post_finetune_epoch = parse(key, value)?,
            "additional_dim" => c.additional_dim = parse(key, value)?,
            "seed" => c.seed = parse(key, value)?,
            "learning_rate" => c.train.adam.learning_rate = parse(key, value)?,
            "batch_size" => c.train.batch_size = parse(key, value)?,
            "layers" => {
                c.selection = LayerSelection::parse(value).ok_or_else(|| ConfigError::Value {
                    key: key.into(),
                    message: format!("expected `all` or block indices, got {value:?}"),
                })?
            }
            "method" => {
                self.method = Method::parse(value).ok_or_else(|| ConfigError::Value {
                    key: key.into(),
                    message: format!("expected basis-selection, svd or fwsvd, got {value:?}"),
                })?
            }
            "target" => {
                self.target = Domain::parse(value).ok_or_else(|| ConfigError::Value {
                    key: key.into(),
                    message: format!("expected arithmetic or patterns, got {value:?}"),
                })?
            }
            "pretrain_epoch" => self.pretrain_epoch = parse(key, value)?,
            "finetune_epoch" => self.finetune_epoch = parse(key, value)?,
            "corpus_seed" => self.corpus_seed = parse(key, value)?,
            "seeds" => {
                self.seeds = value
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| parse(key, s.trim()))
                    .collect::<Result<_, _>>()?
            }
            "preset" => self.preset = Some(value.to_string()),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            "out" => self.out = Some(PathBuf::from(value)),
            "layer" => self.layer = value.to_string(),
            "top_k" => self.top_k = parse(key, value)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    pub fn apply(&mut self, pairs: &BTreeMap<String, String>) -> Result<(), ConfigError> {
        pairs.iter().try_for_each(|(k, v)| self.set(k, v))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.compression.validate().map_err(|e| ConfigError::Value {
            key: "compression".into(),
            message: e.to_string(),
        })?;
        for (key, v) in [("pretrain_epoch", self.pretrain_epoch), ("finetune_epoch", self.finetune_epoch)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(ConfigError::Value {
                    key: key.into(),
                    message: format!("must be a nonnegative number, got {v}"),
                });
            }
        }
        if let Some(p) = &self.preset {
            if !crate::experiment::PRESETS.contains(&p.as_str()) {
                return Err(ConfigError::Value {
                    key: "preset".into(),
                    message: format!("unknown preset {p:?}, expected one of {:?}", crate::experiment::PRESETS),
                });
            }
        }
        Ok(())
    }

    pub fn settings(&self) -> ExperimentSettings {
        ExperimentSettings {
            target: self.target,
            finetune_epoch: self.finetune_epoch,
            train: self.compression.train,
        }
    }

    /// Every key with its effective value, in the file syntax.
    pub fn to_text(&self) -> String {
        let c = &self.compression;
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let seeds: Vec<String> = self.seeds.iter().map(|s| s.to_string()).collect();
        let layers = match &c.selection {
            LayerSelection::All => "all".to_string(),
            LayerSelection::Blocks(b) => b.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(","),
        };
        let pairs: Vec<(&str, String)> = vec![
            ("keep_ratio", c.keep_ratio.to_string()),
            ("pruning_times", c.pruning_times.to_string()),
            ("keeping_epoch", c.keeping_epoch.to_string()),
            ("pruning_epoch", c.pruning_epoch.to_string()),
            ("post_finetune_epoch", c.post_finetune_epoch.to_string()),
            ("additional_dim", c.additional_dim.to_string()),
            ("seed", c.seed.to_string()),
            ("method", self.method.name().into()),
            ("checkpoint", path(&self.checkpoint)),
            ("out", path(&self.out)),
            ("preset", self.preset.clone().unwrap_or_default()),
            ("target", self.target.name().into()),
            ("pretrain_epoch", self.pretrain_epoch.to_string()),
            ("finetune_epoch", self.finetune_epoch.to_string()),
            ("corpus_seed", self.corpus_seed.to_string()),
            ("seeds", seeds.join(",")),
            ("learning_rate", c.train.adam.learning_rate.to_string()),
            ("batch_size", c.train.batch_size.to_string()),
            ("layers", layers),
            ("layer", self.layer.clone()),
            ("top_k", self.top_k.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in pairs {
            if !v.is_empty() {
                let _ = writeln!(out, "{k} = {v}");
            }
        }
        out
    }
}
