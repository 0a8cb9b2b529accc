//! Class-imbalance handling: stratified batches, down/up-sampling and
//! inverse-frequency class weights.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use super::FinetuneError;
use crate::seed::rng_from;

struct ClassSplit {
    minority: Vec<usize>,
    majority: Vec<usize>,
}

/// Indices of each class; the positive class is the minority on ties.
fn split_classes(labels: &[bool]) -> Result<ClassSplit, FinetuneError> {
    let (pos, neg): (Vec<usize>, Vec<usize>) = (0..labels.len()).partition(|&i| labels[i]);
    if pos.is_empty() || neg.is_empty() {
        return Err(FinetuneError::SingleClassData);
    }
    Ok(if pos.len() <= neg.len() {
        ClassSplit { minority: pos, majority: neg }
    } else {
        ClassSplit { minority: neg, majority: pos }
    })
}

/// Minority samples per batch: `max(1, round(batch_size · minority share))`
/// unless overridden.
pub fn minority_per_batch(labels: &[bool], batch_size: usize, overridden: Option<usize>) -> Result<usize, FinetuneError> {
    let c = split_classes(labels)?;
    let m = overridden.unwrap_or_else(|| {
        let p = c.minority.len() as f64 / labels.len() as f64;
        ((batch_size as f64 * p).round() as usize).max(1)
    });
    if m == 0 || m >= batch_size {
        return Err(FinetuneError::InvalidConfig(format!(
            "minority count per batch must lie in [1, {}], got {m}",
            batch_size - 1
        )));
    }
    Ok(m)
}

/// One epoch of batches, each holding `m` minority and `batch_size − m`
/// majority indices (the last batch may hold fewer majority). Every
/// majority index appears exactly once; minority indices are drawn from a
/// pool reshuffled whenever it runs out.
pub fn stratified_batches(
    labels: &[bool],
    batch_size: usize,
    minority_override: Option<usize>,
    seed: u64,
) -> Result<Vec<Vec<usize>>, FinetuneError> {
    if batch_size < 2 {
        return Err(FinetuneError::InvalidConfig("stratified batches need batch_size ≥ 2".into()));
    }
    let m = minority_per_batch(labels, batch_size, minority_override)?;
    let ClassSplit { minority, mut majority } = split_classes(labels)?;
    let mut rng = rng_from(seed);
    majority.shuffle(&mut rng);
    let mut pool: Vec<usize> = Vec::new();
    let mut batches = Vec::with_capacity(majority.len().div_ceil(batch_size - m));
    for chunk in majority.chunks(batch_size - m) {
        let mut batch = Vec::with_capacity(batch_size);
        for _ in 0..m {
            if pool.is_empty() {
                pool = minority.clone();
                pool.shuffle(&mut rng);
            }
            batch.push(pool.pop().expect("refilled pool"));
        }
        batch.extend_from_slice(chunk);
        batch.shuffle(&mut rng);
        batches.push(batch);
    }
    Ok(batches)
}

/// All minority indices plus an equal-sized draw of the majority without
/// replacement, ascending.
pub fn downsample(labels: &[bool], seed: u64) -> Result<Vec<usize>, FinetuneError> {
    let ClassSplit { minority, majority } = split_classes(labels)?;
    let mut rng = rng_from(seed);
    let mut out: Vec<usize> = majority.choose_multiple(&mut rng, minority.len()).copied().collect();
    out.extend(minority);
    out.sort_unstable();
    Ok(out)
}

/// All majority indices plus an equal-sized draw of the minority with
/// replacement, ascending.
pub fn upsample(labels: &[bool], seed: u64) -> Result<Vec<usize>, FinetuneError> {
    let ClassSplit { minority, majority } = split_classes(labels)?;
    let mut rng = rng_from(seed);
    let mut out: Vec<usize> = (0..majority.len())
        .map(|_| minority[rng.random_range(0..minority.len())])
        .collect();
    out.extend(majority);
    out.sort_unstable();
    Ok(out)
}

/// `[w_negative, w_positive]` with `w_c = N / (2 · n_c)`.
pub fn class_weights(labels: &[bool]) -> Result<[f64; 2], FinetuneError> {
    let pos = labels.iter().filter(|&&y| y).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(FinetuneError::SingleClassData);
    }
    let n = labels.len() as f64;
    Ok([n / (2.0 * neg as f64), n / (2.0 * pos as f64)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    fn labels(pos: usize, neg: usize) -> Vec<bool> {
        (0..pos + neg).map(|i| i % (pos + neg) < pos).collect()
    }

    #[test]
    fn batch_composition() {
        let y = labels(20, 100);
        assert_eq!(minority_per_batch(&y, 4, None).unwrap(), 1);
        let b = stratified_batches(&y, 4, None, 1).unwrap();
        assert_eq!(b.len(), 34);
        for batch in &b[..33] {
            assert_eq!(batch.iter().filter(|&&i| y[i]).count(), 1);
            assert_eq!(batch.len(), 4);
        }
        let y = labels(50, 50);
        for batch in stratified_batches(&y, 4, None, 2).unwrap() {
            assert_eq!(batch.iter().filter(|&&i| y[i]).count(), 2);
        }
        assert!(matches!(stratified_batches(&[true; 5], 4, None, 0), Err(FinetuneError::SingleClassData)));
        assert!(stratified_batches(&y, 1, None, 0).is_err());
        assert_eq!(stratified_batches(&y, 4, None, 3).unwrap(), stratified_batches(&y, 4, None, 3).unwrap());
    }

    #[test]
    fn table_counts() {
        let y = labels(1542, 7706);
        let ds = downsample(&y, 0).unwrap();
        assert_eq!(ds.len(), 3084);
        assert_eq!(ds.iter().filter(|&&i| y[i]).count(), 1542);
        let us = upsample(&y, 0).unwrap();
        assert_eq!(us.len(), 15412);
        assert_eq!(us.iter().filter(|&&i| y[i]).count(), 7706);
        let w = class_weights(&y).unwrap();
        assert!((w[0] - 0.600).abs() < 5e-4 && (w[1] - 2.999).abs() < 5e-4, "{w:?}");
        assert_eq!(class_weights(&labels(5, 5)).unwrap(), [1.0, 1.0]);
        let balanced = labels(5, 5);
        assert_eq!(downsample(&balanced, 3).unwrap(), (0..10).collect::<Vec<_>>());
        assert_eq!(upsample(&balanced, 3).unwrap().len(), 10);
    }

    proptest! {
        #[test]
        fn majority_once_minority_present(pos in 1usize..30, neg in 1usize..120, b in 2usize..9, seed: u64) {
            let y = labels(pos, neg);
            let batches = stratified_batches(&y, b, None, seed).unwrap();
            let majority_label = pos > neg;
            let mut seen: BTreeMap<usize, usize> = BTreeMap::new();
            for batch in &batches {
                prop_assert!(batch.iter().any(|&i| y[i] != majority_label));
                for &i in batch.iter().filter(|&&i| y[i] == majority_label) {
                    *seen.entry(i).or_default() += 1;
                }
            }
            let majority_count = if majority_label { pos } else { neg };
            prop_assert_eq!(seen.len(), majority_count);
            prop_assert!(seen.values().all(|&c| c == 1));
        }

        #[test]
        fn resampling_multisets(pos in 1usize..40, neg in 1usize..80, seed: u64) {
            let y = labels(pos, neg);
            let ds = downsample(&y, seed).unwrap();
            let mut unique = ds.clone();
            unique.dedup();
            prop_assert_eq!(unique.len(), ds.len());
            let us = upsample(&y, seed).unwrap();
            let (small, big) = if pos <= neg { (true, false) } else { (false, true) };
            let big_count = us.iter().filter(|&&i| y[i] == big).count();
            prop_assert_eq!(big_count, pos.max(neg));
            prop_assert_eq!(us.iter().filter(|&&i| y[i] == small).count(), pos.max(neg));
            let mut big_idx: Vec<usize> = us.iter().copied().filter(|&i| y[i] == big).collect();
            big_idx.dedup();
            prop_assert_eq!(big_idx.len(), big_count);
        }
    }
}
