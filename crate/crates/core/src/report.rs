//! Run-report CSV: one row per completed grid point, plus merging and
//! per-point aggregation across seeds.

use std::fmt::Write as _;

use thiserror::Error;

pub const HEADER: &str =
    "method,seed,keep_ratio,pruning_times,additional_dim,compression_ratio,rank_per_layer,target_task,accuracy,wall_seconds";

#[derive(Debug, Error, PartialEq)]
pub enum ReportError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("missing or unexpected header: {0:?}")]
    Header(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRow {
    pub method: String,
    pub seed: u64,
    pub keep_ratio: f64,
    pub pruning_times: usize,
    pub additional_dim: usize,
    pub compression_ratio: f64,
    pub rank_per_layer: Vec<usize>,
    pub target_task: String,
    pub accuracy: f64,
    pub wall_seconds: f64,
}

impl RunRow {
    /// Equality of every field except `wall_seconds`, bitwise on floats.
    pub fn same_numbers(&self, other: &Self) -> bool {
        self.method == other.method
            && self.seed == other.seed
            && self.keep_ratio.to_bits() == other.keep_ratio.to_bits()
            && self.pruning_times == other.pruning_times
            && self.additional_dim == other.additional_dim
            && self.compression_ratio.to_bits() == other.compression_ratio.to_bits()
            && self.rank_per_layer == other.rank_per_layer
            && self.target_task == other.target_task
            && self.accuracy.to_bits() == other.accuracy.to_bits()
    }

    fn to_record(&self) -> [String; 10] {
        let ranks: Vec<String> = self.rank_per_layer.iter().map(|r| r.to_string()).collect();
        [
            self.method.clone(),
            self.seed.to_string(),
            self.keep_ratio.to_string(),
            self.pruning_times.to_string(),
            self.additional_dim.to_string(),
            self.compression_ratio.to_string(),
            ranks.join(";"),
            self.target_task.clone(),
            self.accuracy.to_string(),
            self.wall_seconds.to_string(),
        ]
    }

    fn from_record(fields: &csv::StringRecord, lineno: usize) -> Result<Self, ReportError> {
        let err = |message: String| ReportError::Parse { line: lineno, message };
        if fields.len() != 10 {
            return Err(err(format!("expected 10 fields, found {}", fields.len())));
        }
        fn num<T: std::str::FromStr>(s: &str, name: &str) -> Result<T, String> {
            s.trim().parse().map_err(|_| format!("{name}: cannot parse {s:?}"))
        }
        let ranks = if fields[6].is_empty() {
            Vec::new()
        } else {
            fields[6]
                .split(';')
                .map(|r| num(r, "rank_per_layer"))
                .collect::<Result<_, _>>()
                .map_err(err)?
        };
        Ok(Self {
            method: fields[0].to_string(),
            seed: num(&fields[1], "seed").map_err(err)?,
            keep_ratio: num(&fields[2], "keep_ratio").map_err(err)?,
            pruning_times: num(&fields[3], "pruning_times").map_err(err)?,
            additional_dim: num(&fields[4], "additional_dim").map_err(err)?,
            compression_ratio: num(&fields[5], "compression_ratio").map_err(err)?,
            rank_per_layer: ranks,
            target_task: fields[7].to_string(),
            accuracy: num(&fields[8], "accuracy").map_err(err)?,
            wall_seconds: num(&fields[9], "wall_seconds").map_err(err)?,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunReport {
    pub rows: Vec<RunRow>,
}

impl RunReport {
    pub fn to_csv(&self) -> String {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        w.write_record(HEADER.split(',')).expect("in-memory write");
        for r in &self.rows {
            w.write_record(r.to_record()).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("fields are UTF-8")
    }

    pub fn from_csv(text: &str) -> Result<Self, ReportError> {
        let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(text.as_bytes());
        let header = reader.headers().map_err(|e| ReportError::Header(e.to_string()))?;
        if header.iter().map(str::trim).ne(HEADER.split(',')) {
            return Err(ReportError::Header(header.iter().collect::<Vec<_>>().join(",")));
        }
        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| ReportError::Parse {
                line: e.position().map_or(0, |p| p.line() as usize),
                message: e.to_string(),
            })?;
            let line = record.position().map_or(0, |p| p.line() as usize);
            rows.push(RunRow::from_record(&record, line)?);
        }
        Ok(Self { rows })
    }

    /// Same numbers row by row, ignoring wall time.
    pub fn same_numbers(&self, other: &Self) -> bool {
        self.rows.len() == other.rows.len() && self.rows.iter().zip(&other.rows).all(|(a, b)| a.same_numbers(b))
    }
}

/// Concatenates reports and sorts by (task, method, compression ratio).
/// The sort is stable, so equal keys keep their input order.
pub fn merge(reports: &[RunReport]) -> RunReport {
    let mut rows: Vec<RunRow> = reports.iter().flat_map(|r| r.rows.iter().cloned()).collect();
    rows.sort_by(|a, b| {
        a.target_task
            .cmp(&b.target_task)
            .then_with(|| a.method.cmp(&b.method))
            .then_with(|| a.compression_ratio.total_cmp(&b.compression_ratio))
    });
    RunReport { rows }
}

/// Seed-aggregated statistics of one grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSummary {
    pub target_task: String,
    pub method: String,
    pub keep_ratio: f64,
    pub pruning_times: usize,
    pub additional_dim: usize,
    pub runs: usize,
    pub mean_ratio: f64,
    pub mean_accuracy: f64,
    /// Sample standard deviation (0 for a single run).
    pub std_accuracy: f64,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Groups rows by (task, method, keep ratio, pruning times, additional dim)
/// in first-seen order.
pub fn summarize(report: &RunReport) -> Vec<PointSummary> {
    type Key = (String, String, u64, usize, usize);
    let mut keys: Vec<Key> = Vec::new();
    let mut groups: Vec<Vec<&RunRow>> = Vec::new();
    for row in &report.rows {
        let key = (
            row.target_task.clone(),
            row.method.clone(),
            row.keep_ratio.to_bits(),
            row.pruning_times,
            row.additional_dim,
        );
        match keys.iter().position(|k| *k == key) {
            Some(i) => groups[i].push(row),
            None => {
                keys.push(key);
                groups.push(vec![row]);
            }
        }
    }
    groups
        .into_iter()
        .map(|g| {
            let acc: Vec<f64> = g.iter().map(|r| r.accuracy).collect();
            let ratio: Vec<f64> = g.iter().map(|r| r.compression_ratio).collect();
            PointSummary {
                target_task: g[0].target_task.clone(),
                method: g[0].method.clone(),
                keep_ratio: g[0].keep_ratio,
                pruning_times: g[0].pruning_times,
                additional_dim: g[0].additional_dim,
                runs: g.len(),
                mean_ratio: mean(&ratio),
                mean_accuracy: mean(&acc),
                std_accuracy: sample_std(&acc),
            }
        })
        .collect()
}

/// Plain-text accuracy-vs-ratio table, one block per task.
pub fn render_table(summaries: &[PointSummary]) -> String {
    let mut sorted: Vec<&PointSummary> = summaries.iter().collect();
    sorted.sort_by(|a, b| {
        a.target_task
            .cmp(&b.target_task)
            .then_with(|| a.method.cmp(&b.method))
            .then_with(|| a.mean_ratio.total_cmp(&b.mean_ratio))
    });
    let mut out = String::new();
    let mut task = None;
    for s in sorted {
        if task != Some(&s.target_task) {
            let _ = writeln!(out, "task: {}", s.target_task);
            let _ = writeln!(
                out,
                "  {:<16} {:>10} {:>6} {:>4} {:>9} {:>9} {:>8} {:>4}",
                "method", "keep", "prune", "dim", "ratio", "acc", "std", "n"
            );
            task = Some(&s.target_task);
        }
        let _ = writeln!(
            out,
            "  {:<16} {:>10} {:>6} {:>4} {:>9.3} {:>9.4} {:>8.4} {:>4}",
            s.method, s.keep_ratio, s.pruning_times, s.additional_dim, s.mean_ratio, s.mean_accuracy, s.std_accuracy, s.runs
        );
    }
    out
}

/// Linear interpolation of seed-mean accuracy against seed-mean compression
/// ratio; `None` outside the covered ratio range.
pub fn accuracy_at_ratio(points: &[(f64, f64)], ratio: f64) -> Option<f64> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (first, last) = (pts.first()?, pts.last()?);
    if ratio < first.0 || ratio > last.0 {
        return None;
    }
    for w in pts.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if ratio >= x0 && ratio <= x1 {
            if ratio == x1 {
                return Some(y1);
            }
            if ratio == x0 {
                return Some(y0);
            }
            return Some(y0 + (y1 - y0) * (ratio - x0) / (x1 - x0));
        }
    }
    Some(first.1)
}
