//! Cohort construction: KDIGO labeling, exclusions, inclusion criteria,
//! stay-level dataset splits and corpus-level analyses.

mod analysis;
mod kdigo;
mod split;

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{CreatinineSeries, IcuStay, NoteDocument};

pub use analysis::{
    corpus_stats, distinguish_corpora, word_correlations, write_word_correlations, CorpusStats, DistinguishConfig,
    WordCorrelation,
};
pub use kdigo::{baseline_creatinine, label_stay, KdigoLabel, THRESHOLD_SLACK};
pub use split::{split_dataset, split_summary, Split, SplitAssignment, SplitSummaryRow};

#[derive(Debug, Error)]
pub enum CohortError {
    #[error("no creatinine measurement within the baseline window")]
    NoBaselineMeasurement,
    #[error("invalid cohort configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid split fractions: {0}")]
    InvalidFractions(String),
    #[error("no split within ±{gap_pp:.1} percentage points of overall prevalence after {attempts} attempts")]
    UnbalanceableSplit { gap_pp: f64, attempts: usize },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("I/O error writing {path}: {message}")]
    Io { path: String, message: String },
}

pub fn default_exclusion_keywords() -> Vec<String> {
    [
        "aki",
        "arf",
        "esrd",
        "ckd",
        "renal failure",
        "kidney injury",
        "kidney failure",
        "dialysis",
        "hemodialysis",
        "crrt",
    ]
    .map(String::from)
    .to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortConfig {
    pub creatinine_required_within_h: f64,
    pub baseline_window_h: f64,
    pub cond1_delta_mgdl: f64,
    pub cond1_window_h: f64,
    pub cond2_ratio: f64,
    pub detection_window_h: f64,
    pub note_window_h: f64,
    pub exclusion_keywords: Vec<String>,
    /// History codes that exclude a stay.
    pub excluded_history: Vec<String>,
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self {
            creatinine_required_within_h: 72.0,
            baseline_window_h: 24.0,
            cond1_delta_mgdl: 0.3,
            cond1_window_h: 48.0,
            cond2_ratio: 1.5,
            detection_window_h: 72.0,
            note_window_h: 24.0,
            exclusion_keywords: default_exclusion_keywords(),
            excluded_history: vec!["AKI".into(), "CKD".into()],
        }
    }
}

impl CohortConfig {
    pub fn validate(&self) -> Result<(), CohortError> {
        let windows = [
            ("creatinine_required_within_h", self.creatinine_required_within_h),
            ("baseline_window_h", self.baseline_window_h),
            ("cond1_window_h", self.cond1_window_h),
            ("detection_window_h", self.detection_window_h),
            ("note_window_h", self.note_window_h),
        ];
        for (name, w) in windows {
            if !(w > 0.0) {
                return Err(CohortError::InvalidConfig(format!("{name} must be > 0")));
            }
        }
        if !(self.cond2_ratio > 1.0) {
            return Err(CohortError::InvalidConfig("cond2_ratio must be > 1".into()));
        }
        if !(self.cond1_delta_mgdl > 0.0) {
            return Err(CohortError::InvalidConfig("cond1_delta_mgdl must be > 0".into()));
        }
        Ok(())
    }

    fn in_note_window(&self, note: &NoteDocument) -> bool {
        note.chart_time_h >= 0.0 && note.chart_time_h <= self.note_window_h
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ExclusionRecord {
    pub stay_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExclusionOutcome {
    /// Stay ids kept, in input order.
    pub included: Vec<String>,
    pub report: Vec<ExclusionRecord>,
}

/// Whole-word, case-insensitive keyword matcher. Multi-word keywords match
/// across any whitespace run.
#[derive(Debug, Clone)]
pub struct KeywordMatcher {
    patterns: Vec<(String, Regex)>,
}

impl KeywordMatcher {
    pub fn new(keywords: &[String]) -> Self {
        let patterns = keywords
            .iter()
            .filter(|k| !k.trim().is_empty())
            .map(|k| {
                let body = k.split_whitespace().map(regex::escape).collect::<Vec<_>>().join(r"\s+");
                let re = Regex::new(&format!(r"(?i)\b{body}\b")).expect("escaped keyword is a valid regex");
                (k.trim().to_string(), re)
            })
            .collect();
        Self { patterns }
    }

    /// First keyword (in list order) found in `text`.
    pub fn first_match(&self, text: &str) -> Option<&str> {
        self.patterns
            .iter()
            .find(|(_, re)| re.is_match(text))
            .map(|(k, _)| k.as_str())
    }
}

fn notes_by_stay(notes: &[NoteDocument]) -> BTreeMap<&str, Vec<&NoteDocument>> {
    let mut by_stay: BTreeMap<&str, Vec<&NoteDocument>> = BTreeMap::new();
    for n in notes {
        by_stay.entry(n.stay_id.as_str()).or_default().push(n);
    }
    by_stay
}

/// Excludes stays with an AKI/CKD history code or whose first-day notes
/// mention a kidney-dysfunction keyword.
pub fn apply_exclusions(stays: &[IcuStay], notes: &[NoteDocument], config: &CohortConfig) -> ExclusionOutcome {
    let matcher = KeywordMatcher::new(&config.exclusion_keywords);
    let by_stay = notes_by_stay(notes);
    let verdicts: Vec<Option<String>> = stays
        .par_iter()
        .map(|stay| {
            let history = stay
                .history_flags
                .iter()
                .any(|f| config.excluded_history.iter().any(|h| h.eq_ignore_ascii_case(f.trim())));
            if history {
                return Some("history".to_string());
            }
            by_stay
                .get(stay.stay_id.as_str())
                .into_iter()
                .flatten()
                .filter(|n| config.in_note_window(n))
                .find_map(|n| matcher.first_match(&n.text))
                .map(|k| format!("keyword:{k}"))
        })
        .collect();
    let mut included = Vec::new();
    let mut report = Vec::new();
    for (stay, verdict) in stays.iter().zip(verdicts) {
        match verdict {
            Some(reason) => report.push(ExclusionRecord {
                stay_id: stay.stay_id.clone(),
                reason,
            }),
            None => included.push(stay.stay_id.clone()),
        }
    }
    ExclusionOutcome { included, report }
}

/// One retained, labeled stay with its prediction notes (those charted within
/// the note window), ordered by chart time.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledStay {
    pub stay: IcuStay,
    pub label: KdigoLabel,
    pub notes: Vec<NoteDocument>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    /// Sorted by stay id.
    pub stays: Vec<LabeledStay>,
    /// Every dropped stay with the first reason that applied.
    pub report: Vec<ExclusionRecord>,
}

impl Cohort {
    pub fn note_count(&self) -> usize {
        self.stays.iter().map(|s| s.notes.len()).sum()
    }

    pub fn aki_note_count(&self) -> usize {
        self.stays.iter().filter(|s| s.label.is_aki).map(|s| s.notes.len()).sum()
    }

    pub fn notes(&self) -> impl Iterator<Item = &NoteDocument> {
        self.stays.iter().flat_map(|s| s.notes.iter())
    }
}

/// Applies inclusion and exclusion criteria and labels every retained stay.
///
/// A stay is kept when it has a creatinine measurement within
/// `creatinine_required_within_h`, at least one note within `note_window_h`,
/// survives [`apply_exclusions`], and has a first-day baseline.
pub fn select_cohort(
    stays: &[IcuStay],
    creatinine: &BTreeMap<String, CreatinineSeries>,
    notes: &[NoteDocument],
    config: &CohortConfig,
) -> Result<Cohort, CohortError> {
    config.validate()?;
    let exclusions = apply_exclusions(stays, notes, config);
    let excluded: BTreeMap<&str, &str> = exclusions
        .report
        .iter()
        .map(|r| (r.stay_id.as_str(), r.reason.as_str()))
        .collect();
    let by_stay = notes_by_stay(notes);

    let mut sorted: Vec<&IcuStay> = stays.iter().collect();
    sorted.sort_by(|a, b| a.stay_id.cmp(&b.stay_id));

    let outcomes: Vec<Result<LabeledStay, ExclusionRecord>> = sorted
        .par_iter()
        .map(|stay| {
            let drop = |reason: &str| ExclusionRecord {
                stay_id: stay.stay_id.clone(),
                reason: reason.to_string(),
            };
            let empty = CreatinineSeries::default();
            let series = creatinine.get(&stay.stay_id).unwrap_or(&empty);
            if !series.points().iter().any(|(t, _)| *t <= config.creatinine_required_within_h) {
                return Err(drop("no_creatinine_in_window"));
            }
            if let Some(reason) = excluded.get(stay.stay_id.as_str()) {
                return Err(drop(reason));
            }
            let mut window_notes: Vec<NoteDocument> = by_stay
                .get(stay.stay_id.as_str())
                .into_iter()
                .flatten()
                .filter(|n| config.in_note_window(n))
                .map(|n| (*n).clone())
                .collect();
            if window_notes.is_empty() {
                return Err(drop("no_note_in_window"));
            }
            window_notes.sort_by(|a, b| a.chart_time_h.total_cmp(&b.chart_time_h).then(a.note_id.cmp(&b.note_id)));
            let label = label_stay(&stay.stay_id, series, config).map_err(|_| drop("no_baseline"))?;
            Ok(LabeledStay {
                stay: (*stay).clone(),
                label,
                notes: window_notes,
            })
        })
        .collect();

    let mut cohort = Cohort {
        stays: Vec::new(),
        report: Vec::new(),
    };
    for o in outcomes {
        match o {
            Ok(s) => cohort.stays.push(s),
            Err(r) => cohort.report.push(r),
        }
    }
    Ok(cohort)
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CohortError {
    CohortError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Writes `stay_id,label,met_cond1,met_cond2,trigger_time_h,baseline_mgdl,split`.
pub fn write_cohort_csv(path: &Path, cohort: &Cohort, splits: &SplitAssignment) -> Result<(), CohortError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    w.write_record(["stay_id", "label", "met_cond1", "met_cond2", "trigger_time_h", "baseline_mgdl", "split"])
        .map_err(|e| io_err(path, e))?;
    let flag = |b: bool| if b { "1" } else { "0" }.to_string();
    for s in &cohort.stays {
        let l = &s.label;
        w.write_record([
            l.stay_id.clone(),
            flag(l.is_aki),
            flag(l.met_cond1),
            flag(l.met_cond2),
            l.trigger_time_h.map(|t| t.to_string()).unwrap_or_default(),
            l.baseline_mgdl.to_string(),
            splits.get(&l.stay_id).map(|s| s.as_str()).unwrap_or("").to_string(),
        ])
        .map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Writes `stay_id,reason`.
pub fn write_exclusion_report(path: &Path, report: &[ExclusionRecord]) -> Result<(), CohortError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    w.write_record(["stay_id", "reason"]).map_err(|e| io_err(path, e))?;
    for r in report {
        w.write_record([&r.stay_id, &r.reason]).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// One row of a cohort CSV, as read back by downstream stages.
#[derive(Debug, Clone, PartialEq)]
pub struct CohortRow {
    pub stay_id: String,
    pub is_aki: bool,
    pub split: Option<Split>,
}

pub fn read_cohort_csv(path: &Path) -> Result<Vec<CohortRow>, CohortError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| io_err(path, e))?;
    let headers = r.headers().map_err(|e| io_err(path, e))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| io_err(path, format!("missing column `{name}`")))
    };
    let (c_id, c_label, c_split) = (col("stay_id")?, col("label")?, col("split")?);
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| io_err(path, e))?;
        rows.push(CohortRow {
            stay_id: rec.get(c_id).unwrap_or("").to_string(),
            is_aki: rec.get(c_label) == Some("1"),
            split: rec.get(c_split).and_then(Split::parse),
        });
    }
    Ok(rows)
}
