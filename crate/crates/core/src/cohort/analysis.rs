//! Corpus-level statistics and the AKI-vs-general corpus comparisons: a
//! cross-validated bag-of-words logistic-regression probe and per-word
//! Pearson correlations with corpus membership.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::CohortError;
use crate::ingest::{split_sentence_texts, NoteDocument};
use crate::seed::{derive_seed, rng_from};
use crate::tokenizer::Tokenizer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct CorpusStats {
    pub note_count: usize,
    pub sentence_count: usize,
    pub token_count: usize,
}

/// Exact note, sentence and WordPiece token counts.
pub fn corpus_stats(notes: &[NoteDocument], tokenizer: &Tokenizer) -> CorpusStats {
    let mut stats = CorpusStats::default();
    for note in notes {
        stats.note_count += 1;
        for s in split_sentence_texts(&note.text) {
            stats.sentence_count += 1;
            stats.token_count += tokenizer.tokenize(&s).len();
        }
    }
    stats
}

/// Lowercased alphanumeric words present in `text`.
fn word_set(text: &str) -> BTreeSet<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistinguishConfig {
    pub folds: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub seed: u64,
}

impl Default for DistinguishConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            iterations: 300,
            learning_rate: 0.5,
            l2: 1e-3,
            seed: 0,
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

struct LogisticModel {
    weights: Vec<f64>,
    bias: f64,
}

impl LogisticModel {
    fn score(&self, features: &[usize]) -> f64 {
        self.bias + features.iter().map(|&j| self.weights[j]).sum::<f64>()
    }
}

/// Full-batch gradient descent on L2-regularized logistic loss over binary
/// sparse features.
fn fit_logistic(docs: &[&[usize]], labels: &[f64], dim: usize, cfg: &DistinguishConfig) -> LogisticModel {
    let mut model = LogisticModel {
        weights: vec![0.0; dim],
        bias: 0.0,
    };
    let n = docs.len() as f64;
    let mut grad = vec![0.0; dim];
    for _ in 0..cfg.iterations {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut grad_b = 0.0;
        for (doc, &y) in docs.iter().zip(labels) {
            let err = sigmoid(model.score(doc)) - y;
            grad_b += err;
            for &j in *doc {
                grad[j] += err;
            }
        }
        for (w, g) in model.weights.iter_mut().zip(&grad) {
            *w -= cfg.learning_rate * (g / n + cfg.l2 * *w);
        }
        model.bias -= cfg.learning_rate * grad_b / n;
    }
    model
}

/// Mean held-out accuracy of a bag-of-words logistic classifier separating
/// `corpus_a` (label 1) from `corpus_b` (label 0), under class-stratified
/// k-fold cross-validation.
pub fn distinguish_corpora(corpus_a: &[&str], corpus_b: &[&str], config: &DistinguishConfig) -> Result<f64, CohortError> {
    if corpus_a.is_empty() || corpus_b.is_empty() {
        return Err(CohortError::EmptyCorpus);
    }
    let folds = config.folds.max(2);
    let texts: Vec<&str> = corpus_a.iter().chain(corpus_b).copied().collect();
    let labels: Vec<f64> = (0..texts.len()).map(|i| if i < corpus_a.len() { 1.0 } else { 0.0 }).collect();

    let mut lexicon: BTreeMap<String, usize> = BTreeMap::new();
    let sets: Vec<BTreeSet<String>> = texts.iter().map(|t| word_set(t)).collect();
    for s in &sets {
        for w in s {
            let next = lexicon.len();
            lexicon.entry(w.clone()).or_insert(next);
        }
    }
    let docs: Vec<Vec<usize>> = sets.iter().map(|s| s.iter().map(|w| lexicon[w]).collect()).collect();

    let mut rng = rng_from(derive_seed(config.seed, "distinguish/folds"));
    let mut fold_of = vec![0usize; texts.len()];
    for range in [0..corpus_a.len(), corpus_a.len()..texts.len()] {
        let mut idx: Vec<usize> = range.collect();
        idx.shuffle(&mut rng);
        for (k, i) in idx.into_iter().enumerate() {
            fold_of[i] = k % folds;
        }
    }

    let mut accuracies = Vec::with_capacity(folds);
    for fold in 0..folds {
        let (train, test): (Vec<usize>, Vec<usize>) = (0..texts.len()).partition(|&i| fold_of[i] != fold);
        if test.is_empty() || train.is_empty() {
            continue;
        }
        let train_docs: Vec<&[usize]> = train.iter().map(|&i| docs[i].as_slice()).collect();
        let train_labels: Vec<f64> = train.iter().map(|&i| labels[i]).collect();
        let model = fit_logistic(&train_docs, &train_labels, lexicon.len(), config);
        let correct = test
            .iter()
            .filter(|&&i| (sigmoid(model.score(&docs[i])) >= 0.5) == (labels[i] == 1.0))
            .count();
        accuracies.push(correct as f64 / test.len() as f64);
    }
    Ok(accuracies.iter().sum::<f64>() / accuracies.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WordCorrelation {
    pub word: String,
    pub pearson_r: f64,
    /// Number of notes (in either corpus) containing the word.
    pub support: usize,
}

/// Pearson correlation between per-note word presence and membership in
/// `corpus_a`, for every word with a defined correlation, sorted by
/// descending r (ties by word).
pub fn word_correlations(corpus_a: &[&str], corpus_b: &[&str]) -> Result<Vec<WordCorrelation>, CohortError> {
    if corpus_a.is_empty() || corpus_b.is_empty() {
        return Err(CohortError::EmptyCorpus);
    }
    // word -> (notes containing it, of which in corpus_a)
    let mut counts: BTreeMap<String, (i128, i128)> = BTreeMap::new();
    for (text, in_a) in corpus_a.iter().map(|t| (t, 1)).chain(corpus_b.iter().map(|t| (t, 0))) {
        for w in word_set(text) {
            let e = counts.entry(w).or_default();
            e.0 += 1;
            e.1 += in_a;
        }
    }
    let n = (corpus_a.len() + corpus_b.len()) as i128;
    let n_a = corpus_a.len() as i128;
    let mut out: Vec<WordCorrelation> = counts
        .into_iter()
        .filter_map(|(word, (sx, sxy))| {
            let num = n * sxy - sx * n_a;
            let var_x = n * sx - sx * sx;
            let var_y = n * n_a - n_a * n_a;
            if var_x == 0 || var_y == 0 {
                return None;
            }
            let r = num as f64 / ((var_x as f64).sqrt() * (var_y as f64).sqrt());
            Some(WordCorrelation {
                word,
                pearson_r: r.clamp(-1.0, 1.0),
                support: sx as usize,
            })
        })
        .collect();
    out.sort_by(|a, b| b.pearson_r.total_cmp(&a.pearson_r).then_with(|| a.word.cmp(&b.word)));
    Ok(out)
}

/// Writes `word,pearson_r,support`.
pub fn write_word_correlations(path: &Path, rows: &[WordCorrelation]) -> Result<(), CohortError> {
    let err = |e: &dyn std::fmt::Display| CohortError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(|e| err(&e))?;
    w.write_record(["word", "pearson_r", "support"]).map_err(|e| err(&e))?;
    for r in rows {
        w.write_record([r.word.clone(), r.pearson_r.to_string(), r.support.to_string()])
            .map_err(|e| err(&e))?;
    }
    w.flush().map_err(|e| err(&e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{build_test_vocab, Vocabulary, SPECIALS};

    fn note(text: &str) -> NoteDocument {
        NoteDocument {
            note_id: "n1".into(),
            stay_id: "s1".into(),
            chart_time_h: 1.0,
            category: "Nursing".into(),
            text: text.into(),
        }
    }

    #[test]
    fn stats_examples() {
        let tok = Tokenizer::new(build_test_vocab(["pt stable."], 10, true).unwrap());
        assert_eq!(corpus_stats(&[], &tok), CorpusStats::default());
        // "pt", "stable", "." with the declared vocabulary
        let s = corpus_stats(&[note("pt stable.")], &tok);
        assert_eq!(s, CorpusStats { note_count: 1, sentence_count: 1, token_count: 3 });

        // a vocabulary without "stable" splits it into single characters
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(["pt", "s", "##t", "##a", "##b", "##l", "##e", "."].map(String::from));
        let tok = Tokenizer::new(Vocabulary::from_tokens(tokens).unwrap());
        let s = corpus_stats(&[note("pt stable. pt")], &tok);
        assert_eq!(s, CorpusStats { note_count: 1, sentence_count: 2, token_count: 1 + 6 + 1 + 1 });
    }

    #[test]
    fn correlation_extremes() {
        let a = ["renal oliguria", "oliguria noted"];
        let b = ["stable course noted", "stable"];
        let r = word_correlations(&a, &b).unwrap();
        let get = |w: &str| r.iter().find(|x| x.word == w).map(|x| x.pearson_r);
        assert_eq!(get("oliguria"), Some(1.0));
        assert_eq!(get("stable"), Some(-1.0));
        // "noted" is in half of each corpus
        assert_eq!(get("noted"), Some(0.0));
        assert_eq!(r[0].word, "oliguria");
        assert_eq!(r.last().unwrap().word, "stable");
        assert!(r.iter().all(|x| x.support > 0));
    }

    #[test]
    fn equal_rate_in_unequal_corpora_is_uncorrelated() {
        let a = ["x y", "y"];
        let b = ["x z", "z", "x z", "z"];
        let r = word_correlations(&a, &b).unwrap();
        assert_eq!(r.iter().find(|x| x.word == "x").unwrap().pearson_r, 0.0);
        // present everywhere: zero variance, so no row
        let r = word_correlations(&["q"], &["q"]).unwrap();
        assert!(r.is_empty());
    }

    #[test]
    fn empty_corpora_are_rejected() {
        assert!(distinguish_corpora(&[], &["a"], &DistinguishConfig::default()).is_err());
        assert!(word_correlations(&["a"], &[]).is_err());
    }

    #[test]
    fn disjoint_vocabularies_are_separable() {
        let a: Vec<String> = (0..40).map(|i| format!("kidney w{} oliguria", i % 7)).collect();
        let b: Vec<String> = (0..40).map(|i| format!("fracture v{} cast", i % 5)).collect();
        let a: Vec<&str> = a.iter().map(String::as_str).collect();
        let b: Vec<&str> = b.iter().map(String::as_str).collect();
        let acc = distinguish_corpora(&a, &b, &DistinguishConfig::default()).unwrap();
        assert!(acc >= 0.99, "{acc}");
    }
}
