use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Cohort, CohortError};
use crate::seed::{derive_index, rng_from};

const MAX_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s.trim() {
            "train" => Some(Split::Train),
            "validation" => Some(Split::Validation),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// Stay id to split. All notes of a stay follow the stay.
pub type SplitAssignment = BTreeMap<String, Split>;

/// Largest-remainder allocation of `n` items over `fractions`.
fn allocate(n: usize, fractions: [f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts = [0usize; 3];
    for (c, e) in counts.iter_mut().zip(&exact) {
        *c = e.floor() as usize;
    }
    let mut order: Vec<usize> = (0..3).collect();
    // stable: ties go to the earlier split
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())));
    let mut left = n - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

fn validate_fractions(fractions: [f64; 3]) -> Result<(), CohortError> {
    if fractions.iter().any(|f| !(*f > 0.0)) {
        return Err(CohortError::InvalidFractions("every fraction must be positive".into()));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(CohortError::InvalidFractions(format!("fractions sum to {total}, not 1")));
    }
    Ok(())
}

/// Randomly assigns stays to train/validation/test.
///
/// Stays are allocated per label class by largest remainder so each split
/// receives its share of AKI stays; note-level prevalence of every non-empty
/// split must then fall within `max_gap` of the overall note prevalence.
/// Up to 100 seed-derived draws are tried.
pub fn split_dataset(
    cohort: &Cohort,
    fractions: [f64; 3],
    max_gap: f64,
    seed: u64,
) -> Result<SplitAssignment, CohortError> {
    validate_fractions(fractions)?;
    let mut positives: Vec<(&str, usize)> = Vec::new();
    let mut negatives: Vec<(&str, usize)> = Vec::new();
    for s in &cohort.stays {
        let entry = (s.stay.stay_id.as_str(), s.notes.len());
        if s.label.is_aki {
            positives.push(entry);
        } else {
            negatives.push(entry);
        }
    }
    let total_notes = cohort.note_count();
    let overall = if total_notes == 0 {
        0.0
    } else {
        cohort.aki_note_count() as f64 / total_notes as f64
    };

    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = rng_from(derive_index(seed, attempt as u64));
        let mut assignment = SplitAssignment::new();
        // [notes, aki notes] per split
        let mut tally = [[0usize; 2]; 3];
        for (class, members) in [(1usize, &positives), (0usize, &negatives)] {
            let mut shuffled = members.clone();
            shuffled.shuffle(&mut rng);
            let counts = allocate(shuffled.len(), fractions);
            let mut it = shuffled.into_iter();
            for (k, &count) in counts.iter().enumerate() {
                for (stay_id, n_notes) in it.by_ref().take(count) {
                    assignment.insert(stay_id.to_string(), Split::ALL[k]);
                    tally[k][0] += n_notes;
                    tally[k][1] += n_notes * class;
                }
            }
        }
        let balanced = tally
            .iter()
            .filter(|t| t[0] > 0)
            .all(|t| ((t[1] as f64 / t[0] as f64) - overall).abs() <= max_gap + 1e-12);
        if balanced {
            return Ok(assignment);
        }
    }
    Err(CohortError::UnbalanceableSplit {
        gap_pp: max_gap * 100.0,
        attempts: MAX_ATTEMPTS,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitSummaryRow {
    pub split: String,
    pub stays: usize,
    pub notes: usize,
    pub aki_notes: usize,
    pub non_aki_notes: usize,
    pub prevalence: f64,
}

impl SplitSummaryRow {
    /// Prevalence as a percentage with two decimals, e.g. `16.82%`.
    pub fn prevalence_pct(&self) -> String {
        format!("{:.2}%", self.prevalence * 100.0)
    }
}

/// Note counts and AKI prevalence per split, followed by a `total` row.
pub fn split_summary(cohort: &Cohort, splits: &SplitAssignment) -> Vec<SplitSummaryRow> {
    let mut rows: Vec<SplitSummaryRow> = Split::ALL
        .iter()
        .map(|s| SplitSummaryRow {
            split: s.as_str().to_string(),
            stays: 0,
            notes: 0,
            aki_notes: 0,
            non_aki_notes: 0,
            prevalence: 0.0,
        })
        .chain(std::iter::once(SplitSummaryRow {
            split: "total".into(),
            stays: 0,
            notes: 0,
            aki_notes: 0,
            non_aki_notes: 0,
            prevalence: 0.0,
        }))
        .collect();
    for s in &cohort.stays {
        let Some(split) = splits.get(&s.stay.stay_id) else {
            continue;
        };
        let k = Split::ALL.iter().position(|x| x == split).expect("known split");
        for idx in [k, 3] {
            let row = &mut rows[idx];
            row.stays += 1;
            row.notes += s.notes.len();
            if s.label.is_aki {
                row.aki_notes += s.notes.len();
            } else {
                row.non_aki_notes += s.notes.len();
            }
        }
    }
    for row in &mut rows {
        row.prevalence = if row.notes == 0 {
            0.0
        } else {
            row.aki_notes as f64 / row.notes as f64
        };
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{KdigoLabel, LabeledStay};
    use crate::ingest::{IcuStay, NoteDocument};
    use chrono::NaiveDate;
    use proptest::prelude::*;

    fn cohort(labels: &[(bool, usize)]) -> Cohort {
        let stays = labels
            .iter()
            .enumerate()
            .map(|(i, &(aki, n_notes))| {
                let stay_id = format!("s{i:04}");
                LabeledStay {
                    stay: IcuStay {
                        stay_id: stay_id.clone(),
                        patient_id: format!("p{i}"),
                        intime: NaiveDate::from_ymd_opt(2101, 1, 1).unwrap().and_hms_opt(0, 0, 0).unwrap(),
                        history_flags: Default::default(),
                    },
                    label: KdigoLabel {
                        stay_id: stay_id.clone(),
                        is_aki: aki,
                        met_cond1: aki,
                        met_cond2: false,
                        trigger_time_h: aki.then_some(10.0),
                        baseline_mgdl: 1.0,
                    },
                    notes: (0..n_notes)
                        .map(|j| NoteDocument {
                            note_id: format!("{stay_id}-{j}"),
                            stay_id: stay_id.clone(),
                            chart_time_h: 1.0,
                            category: "Nursing".into(),
                            text: "pt stable".into(),
                        })
                        .collect(),
                }
            })
            .collect();
        Cohort {
            stays,
            report: vec![],
        }
    }

    #[test]
    fn proportional_allocation() {
        let c = cohort(&[(true, 1), (false, 1)].repeat(5));
        let a = split_dataset(&c, [0.6, 0.2, 0.2], 0.03, 1).unwrap();
        let count = |s: Split| a.values().filter(|&&x| x == s).count();
        assert_eq!((count(Split::Train), count(Split::Validation), count(Split::Test)), (6, 2, 2));
    }

    #[test]
    fn deterministic_given_seed() {
        let labels: Vec<(bool, usize)> = (0..200).map(|i| (i % 6 == 0, 1 + i % 3)).collect();
        let c = cohort(&labels);
        let a = split_dataset(&c, [0.56, 0.14, 0.30], 0.03, 9).unwrap();
        assert_eq!(a, split_dataset(&c, [0.56, 0.14, 0.30], 0.03, 9).unwrap());
        assert_ne!(a, split_dataset(&c, [0.56, 0.14, 0.30], 0.03, 10).unwrap());
    }

    #[test]
    fn prevalence_within_three_points() {
        // 16.82% AKI prevalence over 1000 single-note stays
        let labels: Vec<(bool, usize)> = (0..1000).map(|i| (i < 168, 1)).collect();
        let c = cohort(&labels);
        let a = split_dataset(&c, [0.56, 0.14, 0.30], 0.03, 3).unwrap();
        let rows = split_summary(&c, &a);
        for row in &rows[..3] {
            assert!((row.prevalence - 0.168).abs() <= 0.03, "{row:?}");
        }
        assert_eq!(rows[3].notes, 1000);
        assert_eq!(rows[3].prevalence_pct(), "16.80%");
    }

    #[test]
    fn impossible_balance_is_an_error() {
        let c = cohort(&[(true, 30), (false, 1), (false, 1), (false, 1)]);
        assert!(matches!(
            split_dataset(&c, [0.5, 0.25, 0.25], 0.03, 0),
            Err(CohortError::UnbalanceableSplit { .. })
        ));
        assert!(matches!(
            split_dataset(&c, [0.5, 0.5, 0.1], 0.03, 0),
            Err(CohortError::InvalidFractions(_))
        ));
    }

    #[test]
    fn largest_remainder() {
        assert_eq!(allocate(10, [0.6, 0.2, 0.2]), [6, 2, 2]);
        assert_eq!(allocate(1, [0.56, 0.14, 0.30]), [1, 0, 0]);
        assert_eq!(allocate(7, [0.56, 0.14, 0.30]), [4, 1, 2]);
        assert_eq!(allocate(0, [0.56, 0.14, 0.30]), [0, 0, 0]);
    }

    proptest! {
        #[test]
        fn splits_partition_the_cohort(n in 1usize..80, seed in any::<u64>()) {
            let labels: Vec<(bool, usize)> = (0..n).map(|i| (i % 2 == 0, 1)).collect();
            let c = cohort(&labels);
            // loose gap: the property under test is the partition, not balance
            let a = split_dataset(&c, [0.56, 0.14, 0.30], 1.0, seed).unwrap();
            prop_assert_eq!(a.len(), n);
            for s in &c.stays {
                prop_assert!(a.contains_key(&s.stay.stay_id));
            }
        }
    }
}
