//! Input tables: ICU stays, serum creatinine measurements and clinical notes.
//!
//! All three tables are UTF-8 CSV with a header row. Times other than the
//! ICU admission timestamp are stored as hours relative to ICU intime.

mod synth;
mod text;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use chrono::{NaiveDateTime, Timelike};
use thiserror::Error;

pub use synth::{generate_synthetic_corpus, SyntheticCorpus, SyntheticSpec};
pub use text::{clean_text, split_sentence_texts, split_sentences};

pub const STAYS_HEADER: [&str; 4] = ["stay_id", "patient_id", "intime", "history_flags"];
pub const CREATININE_HEADER: [&str; 3] = ["stay_id", "time_hours", "value_mgdl"];
pub const NOTES_HEADER: [&str; 5] = ["note_id", "stay_id", "chart_time_hours", "category", "text"];

const INTIME_FORMAT: &str = "%Y-%m-%d %H:%M";

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed CSV: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: missing column `{column}`")]
    MissingColumn { path: PathBuf, column: String },
    #[error("line {line}: unparseable timestamp `{value}`")]
    UnparseableTimestamp { line: u64, value: String },
    #[error("line {line}: unparseable number `{value}` in column `{column}`")]
    UnparseableNumber {
        line: u64,
        column: &'static str,
        value: String,
    },
    #[error("duplicate stay_id `{0}`")]
    DuplicateStayId(String),
    #[error("line {line}: creatinine value {value} is not positive")]
    NonPositiveValue { line: u64, value: f64 },
    #[error("line {line}: measurement time {value} is negative or not finite")]
    NegativeTime { line: u64, value: f64 },
    #[error("invalid synthetic corpus spec: {0}")]
    InvalidSpec(String),
}

/// One ICU admission episode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IcuStay {
    pub stay_id: String,
    pub patient_id: String,
    /// Admission time, minute resolution.
    pub intime: NaiveDateTime,
    /// Prior-condition codes such as `CKD` or `AKI`.
    pub history_flags: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CreatinineMeasurement {
    pub stay_id: String,
    /// Hours since ICU intime.
    pub time_h: f64,
    /// Serum creatinine, mg/dL.
    pub value_mgdl: f64,
}

/// Time-ordered creatinine measurements of one stay as `(hours, mg/dL)` pairs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CreatinineSeries {
    points: Vec<(f64, f64)>,
}

impl CreatinineSeries {
    /// Builds a series, sorting by time. Ties keep input order.
    pub fn new(mut points: Vec<(f64, f64)>) -> Self {
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        Self { points }
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn push_sorted(&mut self, point: (f64, f64)) {
        let at = self.points.partition_point(|p| p.0 <= point.0);
        self.points.insert(at, point);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoteDocument {
    pub note_id: String,
    pub stay_id: String,
    /// Hours since ICU intime; may be negative for notes charted before admission.
    pub chart_time_h: f64,
    pub category: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentence {
    pub note_id: String,
    pub index: usize,
    pub text: String,
}

/// Notes after text cleaning, with the number of notes dropped because their
/// cleaned text was empty.
#[derive(Debug, Clone, PartialEq)]
pub struct CleanedNotes {
    pub notes: Vec<NoteDocument>,
    pub dropped: usize,
}

fn open(path: &Path) -> Result<csv::Reader<File>, IngestError> {
    let file = File::open(path).map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(csv::ReaderBuilder::new().has_headers(true).from_reader(file))
}

/// Resolves the position of each required column in the header.
fn column_indices<R: Read>(
    reader: &mut csv::Reader<R>,
    path: &Path,
    required: &[&str],
) -> Result<Vec<usize>, IngestError> {
    let headers = reader.headers().map_err(|source| IngestError::Csv {
        path: path.to_path_buf(),
        source,
    })?;
    required
        .iter()
        .map(|name| {
            headers
                .iter()
                .position(|h| h.trim() == *name)
                .ok_or_else(|| IngestError::MissingColumn {
                    path: path.to_path_buf(),
                    column: name.to_string(),
                })
        })
        .collect()
}

fn line_of(record: &csv::StringRecord) -> u64 {
    record.position().map_or(0, |p| p.line())
}

fn parse_f64(record: &csv::StringRecord, idx: usize, column: &'static str) -> Result<f64, IngestError> {
    let raw = record.get(idx).unwrap_or("").trim();
    raw.parse::<f64>().map_err(|_| IngestError::UnparseableNumber {
        line: line_of(record),
        column,
        value: raw.to_string(),
    })
}

pub fn parse_intime(raw: &str) -> Option<NaiveDateTime> {
    let raw = raw.trim();
    ["%Y-%m-%d %H:%M:%S", INTIME_FORMAT, "%Y-%m-%dT%H:%M:%S", "%Y-%m-%dT%H:%M"]
        .iter()
        .find_map(|fmt| NaiveDateTime::parse_from_str(raw, fmt).ok())
        .and_then(|t| t.with_second(0))
        .and_then(|t| t.with_nanosecond(0))
}

pub fn format_intime(t: &NaiveDateTime) -> String {
    t.format(INTIME_FORMAT).to_string()
}

pub fn load_stays(path: &Path) -> Result<Vec<IcuStay>, IngestError> {
    let mut reader = open(path)?;
    let cols = column_indices(&mut reader, path, &STAYS_HEADER)?;
    let mut seen = HashSet::new();
    let mut stays = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|source| IngestError::Csv {
            path: path.to_path_buf(),
            source,
        })?;
        let field = |i: usize| record.get(cols[i]).unwrap_or("").trim().to_string();
        let stay_id = field(0);
        let raw_intime = field(2);
        let intime = parse_intime(&raw_intime).ok_or_else(|| IngestError::UnparseableTimestamp {
            line: line_of(&record),
            value: raw_intime.clone(),
        })?;
        if !seen.insert(stay_id.clone()) {
            return Err(IngestError::DuplicateStayId(stay_id));
        }
        let history_flags = field(3)
            .split(';')
            .map(str::trim)
            .filter(|f| !f.is_empty())
            .map(str::to_string)
            .collect();
        stays.push(IcuStay {
            stay_id,
            patient_id: field(1),
            intime,
            history_flags,
        });
    }
    Ok(stays)
}

pub fn load_creatinine(path: &Path) -> Result<BTreeMap<String, CreatinineSeries>, IngestError> {
    let mut reader = open(path)?;
    let cols = column_indices(&mut reader, path, &CREATININE_HEADER)?;
    let mut series: BTreeMap<String, CreatinineSeries> = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(|source| IngestError::Csv {
            path: path.to_path_buf(),
            source,
        })?;
        let stay_id = record.get(cols[0]).unwrap_or("").trim().to_string();
        let time_h = parse_f64(&record, cols[1], "time_hours")?;
        let value = parse_f64(&record, cols[2], "value_mgdl")?;
        if !time_h.is_finite() || time_h < 0.0 {
            return Err(IngestError::NegativeTime {
                line: line_of(&record),
                value: time_h,
            });
        }
        if !(value > 0.0) || !value.is_finite() {
            return Err(IngestError::NonPositiveValue {
                line: line_of(&record),
                value,
            });
        }
        series.entry(stay_id).or_default().push_sorted((time_h, value));
    }
    Ok(series)
}

/// Groups flat measurements into per-stay, time-sorted series.
pub fn group_creatinine(measurements: &[CreatinineMeasurement]) -> BTreeMap<String, CreatinineSeries> {
    let mut series: BTreeMap<String, CreatinineSeries> = BTreeMap::new();
    for m in measurements {
        series
            .entry(m.stay_id.clone())
            .or_default()
            .push_sorted((m.time_h, m.value_mgdl));
    }
    series
}

pub fn load_notes(path: &Path) -> Result<Vec<NoteDocument>, IngestError> {
    let mut reader = open(path)?;
    let cols = column_indices(&mut reader, path, &NOTES_HEADER)?;
    let mut notes = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|source| IngestError::Csv {
            path: path.to_path_buf(),
            source,
        })?;
        let field = |i: usize| record.get(cols[i]).unwrap_or("").to_string();
        notes.push(NoteDocument {
            note_id: field(0).trim().to_string(),
            stay_id: field(1).trim().to_string(),
            chart_time_h: parse_f64(&record, cols[2], "chart_time_hours")?,
            category: field(3),
            text: field(4),
        });
    }
    Ok(notes)
}

/// Cleans every note's text, dropping notes that end up empty.
pub fn clean_notes(notes: Vec<NoteDocument>, cased: bool) -> CleanedNotes {
    let mut dropped = 0;
    let notes = notes
        .into_iter()
        .filter_map(|mut note| {
            note.text = clean_text(&note.text, cased);
            if note.text.is_empty() {
                dropped += 1;
                None
            } else {
                Some(note)
            }
        })
        .collect();
    CleanedNotes { notes, dropped }
}

fn writer(path: &Path) -> Result<csv::Writer<File>, IngestError> {
    let file = File::create(path).map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(csv::Writer::from_writer(file))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> IngestError + '_ {
    move |source| IngestError::Csv {
        path: path.to_path_buf(),
        source,
    }
}

fn finish<W: Write>(mut w: csv::Writer<W>, path: &Path) -> Result<(), IngestError> {
    w.flush().map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_stays(path: &Path, stays: &[IcuStay]) -> Result<(), IngestError> {
    let mut w = writer(path)?;
    w.write_record(STAYS_HEADER).map_err(csv_err(path))?;
    for s in stays {
        let flags: Vec<&str> = s.history_flags.iter().map(String::as_str).collect();
        w.write_record([
            s.stay_id.as_str(),
            s.patient_id.as_str(),
            &format_intime(&s.intime),
            &flags.join(";"),
        ])
        .map_err(csv_err(path))?;
    }
    finish(w, path)
}

pub fn write_creatinine(path: &Path, measurements: &[CreatinineMeasurement]) -> Result<(), IngestError> {
    let mut w = writer(path)?;
    w.write_record(CREATININE_HEADER).map_err(csv_err(path))?;
    for m in measurements {
        w.write_record([m.stay_id.clone(), m.time_h.to_string(), m.value_mgdl.to_string()])
            .map_err(csv_err(path))?;
    }
    finish(w, path)
}

/// Flattens per-stay series back into measurement rows, ordered by stay then time.
pub fn flatten_creatinine(series: &BTreeMap<String, CreatinineSeries>) -> Vec<CreatinineMeasurement> {
    series
        .iter()
        .flat_map(|(stay_id, s)| {
            s.points().iter().map(move |&(time_h, value_mgdl)| CreatinineMeasurement {
                stay_id: stay_id.clone(),
                time_h,
                value_mgdl,
            })
        })
        .collect()
}

pub fn write_notes(path: &Path, notes: &[NoteDocument]) -> Result<(), IngestError> {
    let mut w = writer(path)?;
    w.write_record(NOTES_HEADER).map_err(csv_err(path))?;
    for n in notes {
        w.write_record([
            n.note_id.clone(),
            n.stay_id.clone(),
            n.chart_time_h.to_string(),
            n.category.clone(),
            n.text.clone(),
        ])
        .map_err(csv_err(path))?;
    }
    finish(w, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> PathBuf {
        let p = dir.path().join(name);
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn single_stay_row() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "stays.csv",
            "stay_id,patient_id,intime,history_flags\ns1,p1,2101-10-20 19:08,CKD;HTN\n",
        );
        let stays = load_stays(&p).unwrap();
        assert_eq!(stays.len(), 1);
        assert_eq!(stays[0].stay_id, "s1");
        assert!(stays[0].history_flags.contains("CKD"));
        assert_eq!(stays[0].history_flags.len(), 2);
    }

    #[test]
    fn duplicate_stay_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "stays.csv",
            "stay_id,patient_id,intime,history_flags\ns1,p1,2101-10-20 19:08,\ns1,p2,2101-10-21 01:00,\n",
        );
        assert!(matches!(load_stays(&p), Err(IngestError::DuplicateStayId(id)) if id == "s1"));
    }

    #[test]
    fn header_only_is_empty() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "stays.csv", "stay_id,patient_id,intime,history_flags\n");
        assert!(load_stays(&p).unwrap().is_empty());
    }

    #[test]
    fn missing_column_and_bad_timestamp() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "a.csv", "stay_id,patient_id,history_flags\ns1,p1,\n");
        assert!(matches!(load_stays(&p), Err(IngestError::MissingColumn { column, .. }) if column == "intime"));
        let p = write(
            &dir,
            "b.csv",
            "stay_id,patient_id,intime,history_flags\ns1,p1,yesterday,\n",
        );
        assert!(matches!(load_stays(&p), Err(IngestError::UnparseableTimestamp { .. })));
    }

    #[test]
    fn creatinine_sorted_per_stay() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "cr.csv",
            "stay_id,time_hours,value_mgdl\ns1,5.0,1.2\ns2,3.0,0.9\ns1,2.0,1.0\ns2,1.0,0.8\n",
        );
        let series = load_creatinine(&p).unwrap();
        assert_eq!(series.len(), 2);
        assert_eq!(series["s1"].points(), &[(2.0, 1.0), (5.0, 1.2)]);
        assert_eq!(series["s2"].points(), &[(1.0, 0.8), (3.0, 0.9)]);
    }

    #[test]
    fn creatinine_value_and_time_checks() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "a.csv", "stay_id,time_hours,value_mgdl\ns1,1.0,0.0\n");
        assert!(matches!(load_creatinine(&p), Err(IngestError::NonPositiveValue { .. })));
        let p = write(&dir, "b.csv", "stay_id,time_hours,value_mgdl\ns1,-1.0,1.0\n");
        assert!(matches!(load_creatinine(&p), Err(IngestError::NegativeTime { .. })));
    }

    #[test]
    fn quoted_note_text_and_cleaning_drops_empty() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "notes.csv",
            "note_id,stay_id,chart_time_hours,category,text\nn1,s1,2.5,Nursing,\"Pt stable, no distress.\"\nn2,s1,3,Nursing,\"[**Name**]  \"\n",
        );
        let notes = load_notes(&p).unwrap();
        assert_eq!(notes.len(), 2);
        assert_eq!(notes[0].text, "Pt stable, no distress.");
        let cleaned = clean_notes(notes, false);
        assert_eq!(cleaned.dropped, 1);
        assert_eq!(cleaned.notes[0].text, "pt stable, no distress.");
    }

    #[test]
    fn tables_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = generate_synthetic_corpus(&SyntheticSpec {
            n_stays: 12,
            notes_per_stay: (1, 3),
            ..SyntheticSpec::default()
        })
        .unwrap();
        let (sp, cp, np) = (
            dir.path().join("s.csv"),
            dir.path().join("c.csv"),
            dir.path().join("n.csv"),
        );
        write_stays(&sp, &corpus.stays).unwrap();
        write_creatinine(&cp, &corpus.creatinine).unwrap();
        write_notes(&np, &corpus.notes).unwrap();
        assert_eq!(load_stays(&sp).unwrap(), corpus.stays);
        assert_eq!(load_creatinine(&cp).unwrap(), group_creatinine(&corpus.creatinine));
        assert_eq!(load_notes(&np).unwrap(), corpus.notes);

        // second generation through the writers is a fixed point
        let series = load_creatinine(&cp).unwrap();
        let cp2 = dir.path().join("c2.csv");
        write_creatinine(&cp2, &flatten_creatinine(&series)).unwrap();
        assert_eq!(load_creatinine(&cp2).unwrap(), series);
    }
}
