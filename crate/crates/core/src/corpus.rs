//! Synthetic character corpora: single-digit addition and string patterns.
//!
//! Every line ends in `;`. The answer span of a line is everything after
//! its separator (`=`, `|` or `>`), terminator included.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Token alphabet. Index 0 is the left-padding symbol.
pub const VOCAB: &str = ".0123456789+=;|>abcdefgh";
pub const PAD: usize = 0;
const LETTERS: &[u8] = b"abcdefgh";
const MAX_PATTERN_LEN: usize = 4;

pub fn vocab_size() -> usize {
    VOCAB.len()
}

pub fn encode(line: &str) -> Vec<usize> {
    line.bytes()
        .map(|b| {
            VOCAB
                .bytes()
                .position(|v| v == b)
                .unwrap_or_else(|| panic!("character {:?} outside the vocabulary", b as char))
        })
        .collect()
}

pub fn decode(tokens: &[usize]) -> String {
    tokens.iter().map(|&t| VOCAB.as_bytes()[t] as char).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Domain {
    Arithmetic,
    Patterns,
}

impl Domain {
    pub fn name(self) -> &'static str {
        match self {
            Domain::Arithmetic => "arithmetic",
            Domain::Patterns => "patterns",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "arithmetic" => Some(Domain::Arithmetic),
            "patterns" => Some(Domain::Patterns),
            _ => None,
        }
    }

    /// Every line the domain can produce, in a fixed order.
    pub fn universe(self) -> Vec<String> {
        match self {
            Domain::Arithmetic => (0..10)
                .flat_map(|a| (0..10).map(move |b| format!("{a}+{b}={};", a + b)))
                .collect(),
            Domain::Patterns => {
                let mut out = Vec::new();
                let mut words: Vec<Vec<u8>> = vec![Vec::new()];
                for _ in 0..MAX_PATTERN_LEN {
                    words = words
                        .iter()
                        .flat_map(|w| {
                            LETTERS.iter().map(move |&c| {
                                let mut w = w.clone();
                                w.push(c);
                                w
                            })
                        })
                        .collect();
                    for w in &words {
                        out.push(mirror_line(w));
                        out.push(rotate_line(w));
                    }
                }
                out
            }
        }
    }
}

fn mirror_line(word: &[u8]) -> String {
    let s = String::from_utf8_lossy(word);
    let r: String = s.chars().rev().collect();
    format!("{s}|{r};")
}

fn rotate_line(word: &[u8]) -> String {
    let s = String::from_utf8_lossy(word);
    format!("{s}>{}{};", &s[1..], &s[..1])
}

/// Index of the separator that starts the answer span.
pub fn answer_start(line: &str) -> Option<usize> {
    line.find(['=', '|', '>']).map(|i| i + 1)
}

/// Whether `line` is one the generator can emit.
pub fn is_valid_line(line: &str) -> bool {
    Domain::Arithmetic.universe().iter().any(|l| l == line)
        || Domain::Patterns.universe().iter().any(|l| l == line)
}

/// Held-out split of one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub name: String,
    pub domain: Domain,
    pub train: Vec<String>,
    pub eval: Vec<String>,
}

impl TaskSpec {
    pub fn eval_items(&self) -> Vec<EvalItem> {
        self.eval.iter().map(|l| EvalItem::from_line(l)).collect()
    }
}

/// A prompt and the answer span a greedy decode must reproduce.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalItem {
    pub prompt: Vec<usize>,
    pub answer: Vec<usize>,
}

impl EvalItem {
    pub fn from_line(line: &str) -> Self {
        let cut = answer_start(line).expect("line has a separator");
        let tokens = encode(line);
        Self {
            prompt: tokens[..cut].to_vec(),
            answer: tokens[cut..].to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorpusSizes {
    pub pretrain_lines: usize,
    pub arithmetic_eval: usize,
    pub pattern_train: usize,
    pub pattern_eval: usize,
}

impl Default for CorpusSizes {
    fn default() -> Self {
        Self {
            pretrain_lines: 6000,
            arithmetic_eval: 20,
            pattern_train: 3000,
            pattern_eval: 500,
        }
    }
}

/// Pretraining mixture plus one task per domain.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpora {
    pub pretrain: Vec<String>,
    pub arithmetic: TaskSpec,
    pub patterns: TaskSpec,
}

impl Corpora {
    pub fn task(&self, domain: Domain) -> &TaskSpec {
        match domain {
            Domain::Arithmetic => &self.arithmetic,
            Domain::Patterns => &self.patterns,
        }
    }
}

fn split(domain: Domain, eval: usize, train: Option<usize>, rng: &mut ChaCha8Rng) -> TaskSpec {
    let mut lines = domain.universe();
    lines.shuffle(rng);
    let eval_lines = lines.split_off(lines.len() - eval.min(lines.len()));
    if let Some(t) = train {
        lines.truncate(t);
    }
    TaskSpec {
        name: domain.name().to_string(),
        domain,
        train: lines,
        eval: eval_lines,
    }
}

/// Lines drawn from the two domains by a fair coin per line.
pub fn mixed_lines(arith: &[String], patterns: &[String], count: usize, rng: &mut impl Rng) -> Vec<String> {
    (0..count)
        .map(|_| {
            let pool = if rng.gen_bool(0.5) { arith } else { patterns };
            pool[rng.gen_range(0..pool.len())].clone()
        })
        .collect()
}

pub fn make_corpora(seed: u64, sizes: CorpusSizes) -> Corpora {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arithmetic = split(Domain::Arithmetic, sizes.arithmetic_eval, None, &mut rng);
    let patterns = split(Domain::Patterns, sizes.pattern_eval, Some(sizes.pattern_train), &mut rng);
    let pretrain = mixed_lines(&arithmetic.train, &patterns.train, sizes.pretrain_lines, &mut rng);
    Corpora {
        pretrain,
        arithmetic,
        patterns,
    }
}

/// Next-token samples: each is a `context`-token window and its target.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSet {
    pub context: usize,
    /// `len() × context` tokens, row-major.
    pub windows: Vec<usize>,
    pub targets: Vec<usize>,
}

impl TrainSet {
    /// Every position of every line, each line left-padded independently.
    pub fn from_lines(lines: &[String], context: usize) -> Self {
        let mut windows = Vec::new();
        let mut targets = Vec::new();
        for line in lines {
            let mut padded = vec![PAD; context];
            padded.extend(encode(line));
            for pos in context..padded.len() {
                windows.extend_from_slice(&padded[pos - context..pos]);
                targets.push(padded[pos]);
            }
        }
        Self {
            context,
            windows,
            targets,
        }
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn window(&self, i: usize) -> &[usize] {
        &self.windows[i * self.context..(i + 1) * self.context]
    }
}
