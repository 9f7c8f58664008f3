//! Evaluation metrics: overall leakage rate, task performance, citation
//! coverage, and mode-transition statistics over a training trace.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::{citation_coverage, Instance, Member, PredictionValue};
use crate::parse::parse_completion;
use crate::trace::TraceRow;
use crate::verifier::{audit_completion, DateVerifier};

/// Mean over rows of `n_leak / max(n_total, 1)`.
pub fn olr(rows: &[(u32, u32)]) -> Result<f64> {
    if rows.is_empty() {
        return Err(Error::NoInstances);
    }
    let sum: f64 = rows.iter().map(|&(l, t)| l as f64 / t.max(1) as f64).sum();
    Ok(sum / rows.len() as f64)
}

/// `(ρ + 1) / 2` with ρ the Spearman correlation of two rankings of the
/// same tickers.
pub fn perf_stock(predicted: &[String], truth: &[String]) -> Result<f64> {
    let n = truth.len();
    if predicted.len() != n {
        return Err(Error::InvalidInput(format!("ranking lengths differ: {} vs {n}", predicted.len())));
    }
    let pos: HashMap<&str, usize> = truth.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();
    if pos.len() != n {
        return Err(Error::InvalidInput("true ranking has duplicate tickers".into()));
    }
    if n < 2 {
        return Err(Error::InvalidInput("Spearman needs at least two tickers".into()));
    }
    let mut seen = vec![false; n];
    let mut d2 = 0.0;
    for (i, t) in predicted.iter().enumerate() {
        let &j = pos
            .get(t.as_str())
            .ok_or_else(|| Error::InvalidInput(format!("ticker `{t}` missing from true ranking")))?;
        if std::mem::replace(&mut seen[j], true) {
            return Err(Error::InvalidInput(format!("ticker `{t}` repeated in prediction")));
        }
        let d = i as f64 - j as f64;
        d2 += d * d;
    }
    let nf = n as f64;
    let rho = 1.0 - 6.0 * d2 / (nf * (nf * nf - 1.0));
    Ok((rho + 1.0) / 2.0)
}

/// `max(0, 1 − |ŷ − y| / y)`.
pub fn perf_salary(predicted: f64, actual: f64) -> Result<f64> {
    if !(actual > 0.0) {
        return Err(Error::InvalidInput(format!("actual salary must be positive, got {actual}")));
    }
    Ok((1.0 - (predicted - actual).abs() / actual).max(0.0))
}

/// Brier complement `1 − (p̂ − y)²`.
pub fn perf_legal(p_hat: f64, outcome: f64) -> f64 {
    1.0 - (p_hat - outcome).powi(2)
}

/// `1 − |ŷ − y|`, clamped to [0, 1].
pub fn perf_synthetic(predicted: f64, target: f64) -> f64 {
    (1.0 - (predicted - target).abs()).clamp(0.0, 1.0)
}

/// Dispatch on the prediction variant; mismatched variants or invalid
/// inputs score 0.
pub fn task_perf(prediction: &PredictionValue, label: &PredictionValue) -> f64 {
    match (prediction, label) {
        (PredictionValue::Ranking(p), PredictionValue::Ranking(y)) => perf_stock(p, y).unwrap_or(0.0),
        (PredictionValue::Amount(p), PredictionValue::Amount(y)) => perf_salary(*p, *y).unwrap_or(0.0),
        (PredictionValue::Probability(p), PredictionValue::Probability(y)) => perf_legal(*p, *y),
        (PredictionValue::Scalar(p), PredictionValue::Scalar(y)) => perf_synthetic(*p, *y),
        _ => 0.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeTransition {
    pub initial_percent: f64,
    pub final_percent: f64,
    /// First step whose performance-mode fraction exceeds 50%.
    pub first_step_above_half: Option<usize>,
}

pub fn mode_transition_stats(rows: &[TraceRow]) -> Result<ModeTransition> {
    let (first, last) = match (rows.first(), rows.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(Error::InvalidInput("empty trace".into())),
    };
    Ok(ModeTransition {
        initial_percent: 100.0 * first.mode_fraction,
        final_percent: 100.0 * last.mode_fraction,
        first_step_above_half: rows.iter().find(|r| r.mode_fraction > 0.5).map(|r| r.step),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InstanceMetrics {
    pub id: String,
    pub n_leak: u32,
    pub n_total: u32,
    pub leak_rate: f64,
    pub perf: f64,
    pub coverage: f64,
    pub parse_failure: bool,
}

/// Instance counts by leakage-rate bin (percent).
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LeakHistogram {
    pub zero: usize,
    pub up_to_5: usize,
    pub up_to_10: usize,
    pub above_10: usize,
}

impl LeakHistogram {
    pub fn from_rates(rates: impl IntoIterator<Item = f64>) -> Self {
        let mut h = LeakHistogram::default();
        for r in rates {
            let pct = 100.0 * r;
            match pct {
                p if p <= 0.0 => h.zero += 1,
                p if p <= 5.0 => h.up_to_5 += 1,
                p if p <= 10.0 => h.up_to_10 += 1,
                _ => h.above_10 += 1,
            }
        }
        h
    }

    pub fn total(&self) -> usize {
        self.zero + self.up_to_5 + self.up_to_10 + self.above_10
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub olr: f64,
    pub perf: f64,
    pub coverage: f64,
    pub n_instances: usize,
    pub parse_failures: usize,
    pub leak_histogram: LeakHistogram,
    pub coverage_at_least_90: usize,
    pub coverage_at_least_80: usize,
    pub rows: Vec<InstanceMetrics>,
}

/// Score one completion per instance. Parse failures get perf 0, coverage
/// 0, no claims, and are flagged.
pub fn score_instance(instance: &Instance, member: &Member, verifier: &dyn DateVerifier) -> InstanceMetrics {
    match member {
        Ok(c) => {
            let audit = audit_completion(c, instance.cutoff, verifier);
            InstanceMetrics {
                id: instance.id.clone(),
                n_leak: audit.n_leak,
                n_total: audit.n_dated,
                leak_rate: audit.n_leak as f64 / audit.n_dated.max(1) as f64,
                perf: task_perf(&c.prediction, &instance.label),
                coverage: citation_coverage(c),
                parse_failure: false,
            }
        }
        Err(_) => InstanceMetrics {
            id: instance.id.clone(),
            n_leak: 0,
            n_total: 0,
            leak_rate: 0.0,
            perf: 0.0,
            coverage: 0.0,
            parse_failure: true,
        },
    }
}

pub fn aggregate(rows: Vec<InstanceMetrics>) -> Result<MetricsReport> {
    if rows.is_empty() {
        return Err(Error::NoInstances);
    }
    let n = rows.len() as f64;
    let olr_rows: Vec<(u32, u32)> = rows.iter().map(|r| (r.n_leak, r.n_total)).collect();
    Ok(MetricsReport {
        olr: olr(&olr_rows)?,
        perf: rows.iter().map(|r| r.perf).sum::<f64>() / n,
        coverage: rows.iter().map(|r| r.coverage).sum::<f64>() / n,
        n_instances: rows.len(),
        parse_failures: rows.iter().filter(|r| r.parse_failure).count(),
        leak_histogram: LeakHistogram::from_rates(rows.iter().map(|r| r.leak_rate)),
        coverage_at_least_90: rows.iter().filter(|r| r.coverage >= 0.9).count(),
        coverage_at_least_80: rows.iter().filter(|r| r.coverage >= 0.8).count(),
        rows,
    })
}

impl MetricsReport {
    /// Per-instance CSV, four decimal places.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,n_leak,n_total,leak_rate,perf,coverage,parse_failure\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{:.4},{:.4},{:.4},{}\n",
                r.id, r.n_leak, r.n_total, r.leak_rate, r.perf, r.coverage, r.parse_failure
            ));
        }
        out
    }

    /// One-line summary in percent with one decimal.
    pub fn render(&self) -> String {
        format!(
            "OLR {:.1}%  Perf {:.2}  Cov {:.1}%  (n={}, parse failures={})",
            100.0 * self.olr,
            self.perf,
            100.0 * self.coverage,
            self.n_instances,
            self.parse_failures
        )
    }
}

/// Result of scoring a completions file against instance labels.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreRun {
    #[serde(flatten)]
    pub report: MetricsReport,
    /// Rows that were not JSON objects, lacked `instance_id`, or named an
    /// unknown instance.
    pub unreadable_rows: usize,
    /// Instances with no completion row.
    pub unanswered_instances: usize,
}

/// Parse an instance-labels file, one JSON object per line.
pub fn read_instances(text: &str) -> Result<Vec<Instance>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| Instance::from_json_line(l).map_err(|e| Error::InvalidInput(format!("instances line {}: {e}", n + 1))))
        .collect()
}

/// Score completion rows of the form `{"instance_id": .., "completion": raw}`
/// or `{"instance_id": .., <wire fields>}`. Unreadable rows are counted and
/// skipped; unparseable completions are scored as parse failures.
pub fn score_completions(instances: &[Instance], completions: &str, verifier: &dyn DateVerifier) -> Result<ScoreRun> {
    let by_id: HashMap<&str, &Instance> = instances.iter().map(|i| (i.id.as_str(), i)).collect();
    let mut unreadable = 0;
    let mut work = vec![];
    for line in completions.lines().filter(|l| !l.trim().is_empty()) {
        let Ok(Value::Object(mut row)) = serde_json::from_str::<Value>(line) else {
            unreadable += 1;
            continue;
        };
        let Some(inst) = row.get("instance_id").and_then(Value::as_str).and_then(|id| by_id.get(id)) else {
            unreadable += 1;
            continue;
        };
        let raw = match row.remove("completion") {
            Some(Value::String(s)) => s,
            _ => {
                row.remove("instance_id");
                Value::Object(row).to_string()
            }
        };
        work.push((*inst, raw));
    }
    let answered: std::collections::HashSet<&str> = work.iter().map(|(i, _)| i.id.as_str()).collect();
    let rows: Vec<InstanceMetrics> = work
        .par_iter()
        .map(|(inst, raw)| score_instance(inst, &parse_completion(raw, inst.task_kind), verifier))
        .collect();
    Ok(ScoreRun {
        report: aggregate(rows)?,
        unreadable_rows: unreadable,
        unanswered_instances: instances.len() - answered.len(),
    })
}
