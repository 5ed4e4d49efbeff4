//! Evaluation metrics: L1 distances, exact model likelihoods, rank
//! correlations, mode discovery, diversity, and the metrics CSV record.

use std::collections::HashMap;

use thiserror::Error;

use crate::dag::{topological_order, DagSpec, StateId};
use crate::envs::{edit_distance, ModeSet};
use crate::model::Model;
use crate::tape::log_sum_exp;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("empty sample buffer")]
    EmptyBuffer,
    #[error("need at least two samples")]
    TooFewSamples,
    #[error("constant column has no pearson correlation")]
    ConstantColumn,
    #[error("csv parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// L1 distance between the empirical distribution of visited terminals and
/// the normalized reward. Unvisited terminals contribute their full target
/// mass.
pub fn empirical_l1(
    visited: &[StateId],
    spec: &DagSpec,
    rewards: &[f64],
) -> Result<f64, MetricsError> {
    if visited.is_empty() {
        return Err(MetricsError::EmptyBuffer);
    }
    let mut counts: HashMap<StateId, usize> = HashMap::new();
    for &x in visited {
        *counts.entry(x).or_insert(0) += 1;
    }
    let n = visited.len() as f64;
    let total: f64 = spec.terminal_states().map(|x| rewards[x]).sum();
    let mut l1 = 0.0;
    for x in spec.terminal_states() {
        let emp = counts.get(&x).copied().unwrap_or(0) as f64 / n;
        l1 += (emp - rewards[x] / total).abs();
    }
    Ok(l1)
}

/// Exact log-probability that a forward-policy trajectory terminates at each
/// state: a log-space DP over the topological order. Terminals are sinks, so
/// termination probability equals reach probability.
pub fn log_likelihoods(model: &dyn Model, spec: &DagSpec) -> Vec<f64> {
    let order = topological_order(spec).expect("spec must be acyclic");
    let mut lp = vec![f64::NEG_INFINITY; spec.num_states];
    lp[0] = 0.0;
    for &s in &order {
        if lp[s] == f64::NEG_INFINITY || spec.terminal[s] {
            continue;
        }
        let row = model.log_pf_row(spec, s);
        for (k, &c) in spec.children[s].iter().enumerate() {
            let add = lp[s] + row[k];
            lp[c] = if lp[c] == f64::NEG_INFINITY {
                add
            } else {
                log_sum_exp(&[lp[c], add])
            };
        }
    }
    lp
}

/// Log-probability of terminating at one terminal state.
pub fn model_log_likelihood(model: &dyn Model, spec: &DagSpec, x: StateId) -> f64 {
    log_likelihoods(model, spec)[x]
}

fn pearson_raw(xs: &[f64], ys: &[f64]) -> Result<f64, MetricsError> {
    if xs.len() < 2 {
        return Err(MetricsError::TooFewSamples);
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        cov += (x - mx) * (y - my);
        vx += (x - mx) * (x - mx);
        vy += (y - my) * (y - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return Err(MetricsError::ConstantColumn);
    }
    Ok(cov / (vx * vy).sqrt())
}

/// Average-rank transform (ties share the mean of their positions).
fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).unwrap());
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

pub fn pearson(pairs: &[(f64, f64)]) -> Result<f64, MetricsError> {
    let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    pearson_raw(&xs, &ys)
}

pub fn spearman(pairs: &[(f64, f64)]) -> Result<f64, MetricsError> {
    let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    pearson_raw(&ranks(&xs), &ranks(&ys))
}

/// Number of reference modes with a sample within edit distance `delta`
/// (inclusive).
pub fn modes_found(samples: &[String], modes: &ModeSet, delta: usize) -> usize {
    modes
        .modes
        .iter()
        .filter(|m| samples.iter().any(|s| edit_distance(s, m) <= delta))
        .count()
}

/// Mean pairwise edit distance.
pub fn diversity(samples: &[String]) -> Result<f64, MetricsError> {
    if samples.len() < 2 {
        return Err(MetricsError::TooFewSamples);
    }
    let mut sum = 0.0;
    let mut pairs = 0.0;
    for i in 0..samples.len() {
        for j in i + 1..samples.len() {
            sum += edit_distance(&samples[i], &samples[j]) as f64;
            pairs += 1.0;
        }
    }
    Ok(sum / pairs)
}

/// One evaluation row. Optional fields apply only where meaningful (exact L1
/// needs an enumerable spec; modes/correlation are sequence-domain metrics).
/// Wall-clock time is recorded in the run manifest, not here, so same-seed
/// runs emit byte-identical CSVs.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub iteration: u64,
    pub mean_loss: f64,
    pub exact_l1: Option<f64>,
    pub empirical_l1: Option<f64>,
    pub log_z: f64,
    pub modes_found: Option<usize>,
    pub spearman: Option<f64>,
    pub pearson: Option<f64>,
}

pub const METRICS_CSV_HEADER: &str = "# metrics csv v1\n\
    iteration,mean_loss,exact_l1,empirical_l1,log_z,modes_found,spearman,pearson";

fn opt_f64(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

fn parse_opt_f64(s: &str, line: usize) -> Result<Option<f64>, MetricsError> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse().map(Some).map_err(|e| MetricsError::Parse { line, msg: format!("{e}") })
}

impl MetricsRecord {
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.iteration,
            self.mean_loss,
            opt_f64(self.exact_l1),
            opt_f64(self.empirical_l1),
            self.log_z,
            self.modes_found.map(|m| m.to_string()).unwrap_or_default(),
            opt_f64(self.spearman),
            opt_f64(self.pearson),
        )
    }

    pub fn from_csv_row(row: &str, line: usize) -> Result<Self, MetricsError> {
        let fields: Vec<&str> = row.split(',').collect();
        if fields.len() != 8 {
            return Err(MetricsError::Parse {
                line,
                msg: format!("expected 8 fields, got {}", fields.len()),
            });
        }
        let bad = |msg: String| MetricsError::Parse { line, msg };
        Ok(MetricsRecord {
            iteration: fields[0].parse().map_err(|e| bad(format!("{e}")))?,
            mean_loss: fields[1].parse().map_err(|e| bad(format!("{e}")))?,
            exact_l1: parse_opt_f64(fields[2], line)?,
            empirical_l1: parse_opt_f64(fields[3], line)?,
            log_z: fields[4].parse().map_err(|e| bad(format!("{e}")))?,
            modes_found: if fields[5].is_empty() {
                None
            } else {
                Some(fields[5].parse().map_err(|e| bad(format!("{e}")))?)
            },
            spearman: parse_opt_f64(fields[6], line)?,
            pearson: parse_opt_f64(fields[7], line)?,
        })
    }
}

/// Serialize a metrics stream, header included.
pub fn metrics_to_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::from(METRICS_CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.to_csv_row());
        out.push('\n');
    }
    out
}

pub fn metrics_from_csv(text: &str) -> Result<Vec<MetricsRecord>, MetricsError> {
    let mut out = Vec::new();
    for (i, row) in text.lines().enumerate() {
        if row.starts_with('#') || row.starts_with("iteration") || row.is_empty() {
            continue;
        }
        out.push(MetricsRecord::from_csv_row(row, i + 1)?);
    }
    Ok(out)
}
