//! Binary classification metrics with explicit undefined-value
//! conventions, rank-based AUC, percentile bootstrap intervals, and report
//! rendering.

use std::fmt::Write as _;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::{derive_index, rng_from};

#[derive(Debug, Error, PartialEq)]
pub enum EvaluateError {
    #[error("{labels} labels but {scores} scores")]
    LengthMismatch { labels: usize, scores: usize },
    #[error("both classes must be present")]
    SingleClassData,
    #[error("metric undefined on every bootstrap resample")]
    AllResamplesUndefined,
    #[error("at least 100 bootstrap resamples are required, got {0}")]
    TooFewResamples(usize),
    #[error("nothing to report")]
    EmptyReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

fn check_lengths(labels: &[bool], scores: &[f64]) -> Result<(), EvaluateError> {
    if labels.len() != scores.len() {
        return Err(EvaluateError::LengthMismatch {
            labels: labels.len(),
            scores: scores.len(),
        });
    }
    Ok(())
}

/// A note is predicted positive iff its probability is at least `threshold`.
pub fn confusion(labels: &[bool], probabilities: &[f64], threshold: f64) -> Result<ConfusionCounts, EvaluateError> {
    check_lengths(labels, probabilities)?;
    let mut c = ConfusionCounts::default();
    for (&y, &p) in labels.iter().zip(probabilities) {
        match (y, p >= threshold) {
            (true, true) => c.tp += 1,
            (false, true) => c.fp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fn_ += 1,
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ThresholdMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub specificity: f64,
    pub npv: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        f64::NAN
    } else {
        num as f64 / den as f64
    }
}

/// Ratios are nan on a zero denominator; F1 is 0 when precision is nan or
/// precision + recall is 0.
pub fn metrics(c: &ConfusionCounts) -> ThresholdMetrics {
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = if precision.is_nan() || recall.is_nan() || precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    ThresholdMetrics {
        precision,
        recall,
        f1,
        specificity: ratio(c.tn, c.tn + c.fp),
        npv: ratio(c.tn, c.tn + c.fn_),
    }
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half. Computed exactly from score-sorted groups.
pub fn auc(labels: &[bool], scores: &[f64]) -> Result<f64, EvaluateError> {
    check_lengths(labels, scores)?;
    let pos = labels.iter().filter(|&&y| y).count() as u128;
    let neg = labels.len() as u128 - pos;
    if pos == 0 || neg == 0 {
        return Err(EvaluateError::SingleClassData);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the Mann–Whitney U, to stay in integers
    let (mut twice_u, mut neg_below) = (0u128, 0u128);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut p, mut n) = (0u128, 0u128);
        while j < order.len() && scores[order[j]].total_cmp(&scores[order[i]]).is_eq() {
            if labels[order[j]] {
                p += 1;
            } else {
                n += 1;
            }
            j += 1;
        }
        twice_u += p * (2 * neg_below + n);
        neg_below += n;
        i = j;
    }
    Ok(twice_u as f64 / (2 * pos * neg) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Auc,
    Precision,
    Recall,
    F1,
    Specificity,
    Npv,
}

impl Metric {
    pub const ALL: [Metric; 6] = [
        Metric::Auc,
        Metric::Precision,
        Metric::Recall,
        Metric::F1,
        Metric::Specificity,
        Metric::Npv,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Auc => "auc",
            Metric::Precision => "precision",
            Metric::Recall => "recall",
            Metric::F1 => "f1",
            Metric::Specificity => "specificity",
            Metric::Npv => "npv",
        }
    }

    fn column(self) -> &'static str {
        match self {
            Metric::Auc => "AUC",
            Metric::Precision => "Precision/PPV",
            Metric::Recall => "Recall/Sensitivity",
            Metric::F1 => "F1",
            Metric::Specificity => "SPC",
            Metric::Npv => "NPV",
        }
    }

    /// Value on one dataset; nan where undefined (AUC on a single class).
    pub fn evaluate(self, labels: &[bool], probabilities: &[f64], threshold: f64) -> f64 {
        if self == Metric::Auc {
            return auc(labels, probabilities).unwrap_or(f64::NAN);
        }
        let m = match confusion(labels, probabilities, threshold) {
            Ok(c) => metrics(&c),
            Err(_) => return f64::NAN,
        };
        match self {
            Metric::Precision => m.precision,
            Metric::Recall => m.recall,
            Metric::F1 => m.f1,
            Metric::Specificity => m.specificity,
            Metric::Npv => m.npv,
            Metric::Auc => unreachable!(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BootstrapConfig {
    pub n_resamples: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            n_resamples: 1000,
            alpha: 0.05,
            seed: 0,
        }
    }
}

/// Linear-interpolation quantile of sorted values.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Percentile interval of `metric` over resamples of the notes drawn with
/// replacement; resamples where the metric is nan are skipped.
pub fn bootstrap_ci<F>(labels: &[bool], scores: &[f64], metric: F, config: &BootstrapConfig) -> Result<(f64, f64), EvaluateError>
where
    F: Fn(&[bool], &[f64]) -> f64 + Sync,
{
    check_lengths(labels, scores)?;
    if config.n_resamples < 100 {
        return Err(EvaluateError::TooFewResamples(config.n_resamples));
    }
    let n = labels.len();
    if n == 0 {
        return Err(EvaluateError::AllResamplesUndefined);
    }
    let mut values: Vec<f64> = (0..config.n_resamples)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng_from(derive_index(config.seed, r as u64));
            let (mut l, mut s) = (Vec::with_capacity(n), Vec::with_capacity(n));
            for _ in 0..n {
                let i = rng.random_range(0..n);
                l.push(labels[i]);
                s.push(scores[i]);
            }
            metric(&l, &s)
        })
        .collect();
    values.retain(|v| !v.is_nan());
    if values.is_empty() {
        return Err(EvaluateError::AllResamplesUndefined);
    }
    values.sort_by(f64::total_cmp);
    Ok((quantile(&values, config.alpha / 2.0), quantile(&values, 1.0 - config.alpha / 2.0)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricValue {
    pub metric: Metric,
    pub value: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub model: String,
    pub setting: String,
    pub values: Vec<MetricValue>,
}

/// All six metrics with bootstrap intervals. A nan point value gets a nan
/// interval; a finite one is widened if needed to contain the point.
pub fn metric_report(
    model: &str,
    setting: &str,
    labels: &[bool],
    probabilities: &[f64],
    threshold: f64,
    bootstrap: &BootstrapConfig,
) -> Result<MetricReport, EvaluateError> {
    check_lengths(labels, probabilities)?;
    let mut values = Vec::with_capacity(Metric::ALL.len());
    for metric in Metric::ALL {
        let value = metric.evaluate(labels, probabilities, threshold);
        let (ci_low, ci_high) = if value.is_nan() {
            (f64::NAN, f64::NAN)
        } else {
            match bootstrap_ci(labels, probabilities, |l, s| metric.evaluate(l, s, threshold), bootstrap) {
                Ok((lo, hi)) => (lo.min(value), hi.max(value)),
                Err(EvaluateError::AllResamplesUndefined) => (f64::NAN, f64::NAN),
                Err(e) => return Err(e),
            }
        };
        values.push(MetricValue {
            metric,
            value,
            ci_low,
            ci_high,
        });
    }
    Ok(MetricReport {
        model: model.to_string(),
        setting: setting.to_string(),
        values,
    })
}

fn fmt3(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else {
        format!("{v:.3}")
    }
}

/// `"0.761 (0.700-0.810)"`, or `"nan (nan-nan)"`.
pub fn format_cell(v: &MetricValue) -> String {
    format!("{} ({}-{})", fmt3(v.value), fmt3(v.ci_low), fmt3(v.ci_high))
}

fn csv_number(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else {
        v.to_string()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedReport {
    pub text: String,
    pub csv: String,
    pub json: String,
}

/// Text table (one row per model/setting), long-form CSV
/// `model,setting,metric,value,ci_low,ci_high`, and a JSON mirror of the CSV
/// rows (nan as null).
pub fn render_report(reports: &[MetricReport]) -> Result<RenderedReport, EvaluateError> {
    if reports.is_empty() || reports.iter().any(|r| r.values.is_empty()) {
        return Err(EvaluateError::EmptyReport);
    }
    let mut header = vec!["Model".to_string(), "Setting".to_string()];
    header.extend(reports[0].values.iter().map(|v| v.metric.column().to_string()));
    let mut rows = vec![header];
    for r in reports {
        let mut row = vec![r.model.clone(), r.setting.clone()];
        row.extend(r.values.iter().map(format_cell));
        rows.push(row);
    }
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|c| rows.iter().map(|r| r.get(c).map_or(0, |s| s.chars().count())).max().unwrap_or(0))
        .collect();
    let mut text = String::new();
    for row in &rows {
        let cells: Vec<String> = row.iter().zip(&widths).map(|(s, &w)| format!("{s:<w$}")).collect();
        writeln!(text, "{}", cells.join(" | ").trim_end()).unwrap();
    }

    let mut csv = String::from("model,setting,metric,value,ci_low,ci_high\n");
    let mut json_rows = Vec::new();
    for r in reports {
        for v in &r.values {
            let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
            w.write_record([
                r.model.as_str(),
                r.setting.as_str(),
                v.metric.name(),
                &csv_number(v.value),
                &csv_number(v.ci_low),
                &csv_number(v.ci_high),
            ])
            .expect("in-memory write");
            csv.push_str(&String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8"));
            let num = |x: f64| if x.is_nan() { serde_json::Value::Null } else { serde_json::json!(x) };
            json_rows.push(serde_json::json!({
                "model": r.model,
                "setting": r.setting,
                "metric": v.metric.name(),
                "value": num(v.value),
                "ci_low": num(v.ci_low),
                "ci_high": num(v.ci_high),
            }));
        }
    }
    let json = serde_json::to_string_pretty(&json_rows).expect("json values serialize");
    Ok(RenderedReport { text, csv, json })
}
