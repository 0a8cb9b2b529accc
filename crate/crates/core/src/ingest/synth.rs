//! Seeded synthetic corpora with a planted label signal.
//!
//! Positive stays get a creatinine course meeting exactly one chosen KDIGO
//! condition and notes in which background words are replaced by signal
//! tokens at `signal_rate`. Negative stays get a flat course and pure
//! background text.

use std::collections::{BTreeMap, BTreeSet};

use chrono::{Duration, NaiveDate};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{CreatinineMeasurement, IcuStay, IngestError, NoteDocument};
use crate::seed::{derive_seed, rng_from};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n_stays: usize,
    pub prevalence: f64,
    pub signal_tokens: Vec<String>,
    /// Size of the background word list.
    pub vocab_size: usize,
    /// Per-word probability that a positive note's word is a signal token.
    pub signal_rate: f64,
    /// Inclusive range of notes per stay.
    pub notes_per_stay: (usize, usize),
    pub sentences_per_note: (usize, usize),
    pub words_per_sentence: (usize, usize),
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_stays: 100,
            prevalence: 0.17,
            signal_tokens: ["oliguria", "nephrotoxic", "vancomycin", "contrast"]
                .map(String::from)
                .to_vec(),
            vocab_size: 200,
            signal_rate: 0.1,
            notes_per_stay: (1, 1),
            sentences_per_note: (3, 8),
            words_per_sentence: (5, 12),
            seed: 17,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub stays: Vec<IcuStay>,
    pub creatinine: Vec<CreatinineMeasurement>,
    pub notes: Vec<NoteDocument>,
    /// Planted label per stay.
    pub labels: BTreeMap<String, bool>,
}

const ONSETS: [&str; 14] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const NUCLEI: [&str; 5] = ["a", "e", "i", "o", "u"];

/// Consonant-vowel words; none can collide with clinical keyword lists,
/// which all contain a vowel-initial syllable, a vowel pair or a consonant cluster.
fn background_word(index: usize) -> String {
    let syllables = ONSETS.len() * NUCLEI.len();
    let mut n = index + syllables; // at least two syllables
    let mut parts = Vec::new();
    while n > 0 {
        let s = n % syllables;
        parts.push(format!("{}{}", ONSETS[s / NUCLEI.len()], NUCLEI[s % NUCLEI.len()]));
        n /= syllables;
    }
    parts.concat()
}

fn validate(spec: &SyntheticSpec) -> Result<(), IngestError> {
    let bad = |m: &str| Err(IngestError::InvalidSpec(m.to_string()));
    if !(spec.prevalence > 0.0 && spec.prevalence < 1.0) {
        return bad("prevalence must lie in (0, 1)");
    }
    if spec.n_stays == 0 {
        return bad("n_stays must be positive");
    }
    if spec.vocab_size == 0 {
        return bad("vocab_size must be positive");
    }
    if !(0.0..=1.0).contains(&spec.signal_rate) {
        return bad("signal_rate must lie in [0, 1]");
    }
    if spec.signal_rate > 0.0 && spec.signal_tokens.is_empty() {
        return bad("signal_rate > 0 requires signal tokens");
    }
    for (name, (lo, hi)) in [
        ("notes_per_stay", spec.notes_per_stay),
        ("sentences_per_note", spec.sentences_per_note),
        ("words_per_sentence", spec.words_per_sentence),
    ] {
        if lo == 0 || lo > hi {
            return bad(&format!("{name} must be a non-empty range of positive counts"));
        }
    }
    Ok(())
}

/// Grid unit for generated creatinine values (mg/dL).
const GRID: f64 = 20.0;

fn grid(units: u32) -> f64 {
    units as f64 / GRID
}

fn quarter_hours(rng: &mut ChaCha8Rng, lo_h: f64, hi_h: f64) -> f64 {
    let lo = (lo_h * 4.0).ceil() as i64;
    let hi = (hi_h * 4.0).floor() as i64;
    rng.random_range(lo..=hi) as f64 / 4.0
}

enum Course {
    Flat,
    RiseWithin48h,
    RatioAbove150,
}

fn creatinine_course(rng: &mut ChaCha8Rng, course: Course) -> Vec<(f64, f64)> {
    match course {
        Course::Flat => {
            // every value within +0.2 of the baseline: no pair rises by 0.3, no ratio reaches 1.5
            let base = rng.random_range(12..=24u32);
            let t0 = quarter_hours(rng, 0.0, 20.0);
            let mut points = vec![(t0, grid(base))];
            for _ in 0..rng.random_range(1..=4) {
                let t = quarter_hours(rng, t0, 72.0);
                points.push((t, grid(base + rng.random_range(0..=4u32))));
            }
            points
        }
        Course::RiseWithin48h => {
            // baseline >= 1.0 keeps the ratio below 1.5 for rises up to 0.45
            let base = rng.random_range(20..=28u32);
            let t0 = quarter_hours(rng, 0.0, 20.0);
            let t1 = quarter_hours(rng, t0 + 0.25, (t0 + 48.0).min(72.0));
            vec![(t0, grid(base)), (t1, grid(base + rng.random_range(6..=9u32)))]
        }
        Course::RatioAbove150 => {
            // a single late value, more than 48 h after the baseline draw
            let base = rng.random_range(10..=16u32);
            let t0 = quarter_hours(rng, 0.0, 20.0);
            let t1 = quarter_hours(rng, t0 + 48.25, 72.0);
            let peak = (base * 3).div_ceil(2) + rng.random_range(0..=3u32);
            vec![(t0, grid(base)), (t1, grid(peak))]
        }
    }
}

fn sentence(
    rng: &mut ChaCha8Rng,
    words: &[String],
    zipf: &WeightedIndex<f64>,
    signal: &[String],
    signal_rate: f64,
    len: (usize, usize),
) -> String {
    let n = rng.random_range(len.0..=len.1);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        if signal_rate > 0.0 && rng.random::<f64>() < signal_rate {
            out.push(signal[rng.random_range(0..signal.len())].clone());
        } else {
            out.push(words[zipf.sample(rng)].clone());
        }
    }
    format!("{}.", out.join(" "))
}

pub fn generate_synthetic_corpus(spec: &SyntheticSpec) -> Result<SyntheticCorpus, IngestError> {
    validate(spec)?;
    let signal_set: BTreeSet<&str> = spec.signal_tokens.iter().map(String::as_str).collect();
    let words: Vec<String> = (0..)
        .map(background_word)
        .filter(|w| !signal_set.contains(w.as_str()))
        .take(spec.vocab_size)
        .collect();
    let zipf = WeightedIndex::new((0..words.len()).map(|r| 1.0 / (r as f64 + 1.0)))
        .expect("positive weights");

    let n_pos = ((spec.n_stays as f64) * spec.prevalence).round() as usize;
    let mut order: Vec<usize> = (0..spec.n_stays).collect();
    order.shuffle(&mut rng_from(derive_seed(spec.seed, "synth/labels")));
    let mut positive = vec![false; spec.n_stays];
    for &i in &order[..n_pos] {
        positive[i] = true;
    }

    let epoch = NaiveDate::from_ymd_opt(2100, 1, 1)
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .expect("valid epoch");
    let width = spec.n_stays.to_string().len().max(5);
    let mut stays = Vec::with_capacity(spec.n_stays);
    let mut creatinine = Vec::new();
    let mut notes = Vec::new();
    let mut labels = BTreeMap::new();
    let mut note_counter = 0usize;

    for (i, &is_pos) in positive.iter().enumerate() {
        // one stream per stay so that stays are independent of each other
        let mut rng = rng_from(derive_seed(spec.seed, &format!("synth/stay/{i}")));
        let stay_id = format!("s{:0width$}", i + 1);
        let intime = epoch + Duration::minutes(rng.random_range(0..60 * 24 * 365));
        let mut history_flags = BTreeSet::new();
        if rng.random::<f64>() < 0.2 {
            history_flags.insert("HTN".to_string());
        }
        stays.push(IcuStay {
            stay_id: stay_id.clone(),
            patient_id: format!("p{:0width$}", i + 1),
            intime,
            history_flags,
        });

        let course = match (is_pos, rng.random::<bool>()) {
            (false, _) => Course::Flat,
            (true, true) => Course::RiseWithin48h,
            (true, false) => Course::RatioAbove150,
        };
        let mut points = creatinine_course(&mut rng, course);
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        creatinine.extend(points.into_iter().map(|(time_h, value_mgdl)| CreatinineMeasurement {
            stay_id: stay_id.clone(),
            time_h,
            value_mgdl,
        }));

        let rate = if is_pos { spec.signal_rate } else { 0.0 };
        let n_notes = rng.random_range(spec.notes_per_stay.0..=spec.notes_per_stay.1);
        let mut stay_notes = Vec::with_capacity(n_notes);
        for _ in 0..n_notes {
            let n_sent = rng.random_range(spec.sentences_per_note.0..=spec.sentences_per_note.1);
            let text = (0..n_sent)
                .map(|_| sentence(&mut rng, &words, &zipf, &spec.signal_tokens, rate, spec.words_per_sentence))
                .collect::<Vec<_>>()
                .join(" ");
            let category = if rng.random::<bool>() { "Nursing" } else { "Physician" };
            stay_notes.push((quarter_hours(&mut rng, 0.0, 23.75), category, text));
        }
        stay_notes.sort_by(|a, b| a.0.total_cmp(&b.0));
        for (chart_time_h, category, text) in stay_notes {
            note_counter += 1;
            notes.push(NoteDocument {
                note_id: format!("n{:07}", note_counter),
                stay_id: stay_id.clone(),
                chart_time_h,
                category: category.to_string(),
                text,
            });
        }
        labels.insert(stay_id, is_pos);
    }

    Ok(SyntheticCorpus {
        stays,
        creatinine,
        notes,
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prevalence_rounding() {
        let c = generate_synthetic_corpus(&SyntheticSpec {
            n_stays: 100,
            prevalence: 0.17,
            ..SyntheticSpec::default()
        })
        .unwrap();
        assert_eq!(c.labels.values().filter(|&&p| p).count(), 17);
        assert_eq!(c.stays.len(), 100);
    }

    #[test]
    fn deterministic_given_seed() {
        let spec = SyntheticSpec {
            n_stays: 30,
            notes_per_stay: (1, 2),
            ..SyntheticSpec::default()
        };
        assert_eq!(
            generate_synthetic_corpus(&spec).unwrap(),
            generate_synthetic_corpus(&spec).unwrap()
        );
        let other = generate_synthetic_corpus(&SyntheticSpec { seed: 99, ..spec }).unwrap();
        assert_ne!(other.notes, generate_synthetic_corpus(&SyntheticSpec::default()).unwrap().notes);
    }

    #[test]
    fn invalid_specs() {
        for spec in [
            SyntheticSpec { prevalence: 0.0, ..SyntheticSpec::default() },
            SyntheticSpec { prevalence: 1.0, ..SyntheticSpec::default() },
            SyntheticSpec { n_stays: 0, ..SyntheticSpec::default() },
            SyntheticSpec { words_per_sentence: (3, 2), ..SyntheticSpec::default() },
        ] {
            assert!(matches!(generate_synthetic_corpus(&spec), Err(IngestError::InvalidSpec(_))));
        }
    }

    #[test]
    fn background_words_are_distinct_cv_words() {
        let words: Vec<String> = (0..2000).map(background_word).collect();
        let set: BTreeSet<&String> = words.iter().collect();
        assert_eq!(set.len(), words.len());
        assert!(words.iter().all(|w| w.len() >= 4));
    }

    #[test]
    fn every_stay_has_early_creatinine_and_note() {
        let c = generate_synthetic_corpus(&SyntheticSpec {
            n_stays: 50,
            ..SyntheticSpec::default()
        })
        .unwrap();
        for s in &c.stays {
            assert!(c.creatinine.iter().any(|m| m.stay_id == s.stay_id && m.time_h <= 24.0));
            assert!(c.notes.iter().any(|n| n.stay_id == s.stay_id && n.chart_time_h <= 24.0));
        }
    }
}
