//! Word-level salience from the final-layer `[CLS]` attention row, and a
//! static HTML highlight view of a note.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{EncoderOutput, ModelConfig, ParameterSet};
use crate::finetune::{forward_note, DocMode, FinetuneConfig, FinetuneError};
use crate::ingest::{split_sentence_texts, NoteDocument};
use crate::tokenizer::{Tokenizer, WordPieces};

#[derive(Debug, Error)]
pub enum AttnvizError {
    #[error("layer {layer} out of range for a {layers}-layer model")]
    InvalidLayer { layer: usize, layers: usize },
    #[error(transparent)]
    Finetune(#[from] FinetuneError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// Words of a note in order with normalized scores in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct SalienceMap {
    pub tokens: Vec<String>,
    pub scores: Vec<f64>,
}

impl SalienceMap {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Which attention layer to read; heads are always averaged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct AttentionSelection {
    /// Defaults to the last layer.
    pub layer: Option<usize>,
}

/// Head-mean attention from `[CLS]` to every position of one sequence.
fn cls_row(out: &EncoderOutput<f32>, layer: usize) -> Vec<f64> {
    let n = out.seq_len;
    let mut row = vec![0.0f64; n];
    for head in 0..out.num_heads {
        for (r, &a) in row.iter_mut().zip(&out.attention(layer, head)[..n]) {
            *r += a as f64;
        }
    }
    row.iter_mut().for_each(|r| *r /= out.num_heads as f64);
    row
}

/// Scores words by the maximum over their wordpieces. Pieces are laid out
/// after `[CLS]`; any piece beyond `usable` positions (truncated away or
/// the closing `[SEP]`) scores 0.
fn word_scores(words: &[WordPieces], row: Option<&[f64]>, usable: usize, scale: f64, out: &mut SalienceMap) {
    let mut pos = 1;
    for w in words {
        let mut best = 0.0f64;
        for _ in &w.pieces {
            if let Some(r) = row {
                if pos < usable {
                    best = best.max(r[pos] * scale);
                }
            }
            pos += 1;
        }
        out.tokens.push(w.word.clone());
        out.scores.push(best);
    }
}

/// Min-max normalization; a constant map becomes all ones if positive,
/// all zeros otherwise.
pub fn normalize_scores(scores: &mut [f64]) {
    let (lo, hi) = scores
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &s| (lo.min(s), hi.max(s)));
    if scores.is_empty() {
        return;
    }
    if hi > lo {
        scores.iter_mut().for_each(|s| *s = (*s - lo) / (hi - lo));
    } else {
        let v = if hi > 0.0 { 1.0 } else { 0.0 };
        scores.iter_mut().for_each(|s| *s = v);
    }
}

/// Salience of every word in the note under the configured document mode.
/// Under pooling each sentence's attention is scaled by the fraction of
/// embedding dimensions it supplied to the max-pool; sentences that were
/// not sampled score 0.
pub fn attention_salience(
    params: &ParameterSet<f32>,
    model: &ModelConfig,
    tokenizer: &Tokenizer,
    config: &FinetuneConfig,
    note: &NoteDocument,
    selection: AttentionSelection,
) -> Result<SalienceMap, AttnvizError> {
    let layer = selection.layer.unwrap_or(model.num_layers.saturating_sub(1));
    if layer >= model.num_layers {
        return Err(AttnvizError::InvalidLayer {
            layer,
            layers: model.num_layers,
        });
    }
    let fwd = forward_note(params, model, tokenizer, config, note, false, 0)?;
    let mut map = SalienceMap::default();
    match config.doc_mode {
        DocMode::Truncating => {
            let out = &fwd.outputs[0];
            let row = cls_row(out, layer);
            word_scores(&tokenizer.words(&note.text), Some(&row), out.seq_len - 1, 1.0, &mut map);
        }
        DocMode::Pooling => {
            let h = model.hidden_dim as f64;
            let argmax = fwd.embedding.contributing_sentence_per_dim.as_deref().unwrap_or(&[]);
            for (i, sentence) in split_sentence_texts(&note.text).iter().enumerate() {
                let words = tokenizer.words(sentence);
                match fwd.embedding.sentences.iter().position(|&s| s == i) {
                    Some(k) => {
                        let out = &fwd.outputs[k];
                        let fraction = argmax.iter().filter(|&&a| a == k).count() as f64 / h;
                        let row = cls_row(out, layer);
                        word_scores(&words, Some(&row), out.seq_len - 1, fraction, &mut map);
                    }
                    None => word_scores(&words, None, 0, 0.0, &mut map),
                }
            }
        }
    }
    normalize_scores(&mut map.scores);
    Ok(map)
}

/// Header information shown above the highlighted note.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoteMetadata {
    pub note_id: String,
    pub probability: f64,
    pub label: Option<bool>,
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            _ => out.push(c),
        }
    }
    out
}

/// Self-contained HTML page; each word's background alpha equals its score.
pub fn render_html_string(salience: &SalienceMap, meta: &NoteMetadata) -> String {
    let label = match meta.label {
        Some(true) => "AKI",
        Some(false) => "non-AKI",
        None => "unknown",
    };
    let mut html = String::new();
    html.push_str("<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\">\n");
    let _ = writeln!(html, "<title>Note {}</title>", escape(&meta.note_id));
    html.push_str("</head>\n<body style=\"font-family: sans-serif; max-width: 60em; margin: 2em auto;\">\n");
    let _ = writeln!(
        html,
        "<div style=\"border-bottom: 1px solid #888; margin-bottom: 1em;\">note_id: <b>{}</b> &middot; predicted probability: <b>{:.4}</b> &middot; true label: <b>{}</b></div>",
        escape(&meta.note_id),
        meta.probability,
        label
    );
    html.push_str("<p style=\"line-height: 1.8;\">\n");
    for (word, score) in salience.tokens.iter().zip(&salience.scores) {
        let _ = writeln!(
            html,
            "<span style=\"background-color: rgba(220, 40, 40, {score:.4});\">{}</span>",
            escape(word)
        );
    }
    html.push_str("</p>\n</body>\n</html>\n");
    html
}

pub fn render_html(salience: &SalienceMap, meta: &NoteMetadata, path: &Path) -> Result<(), AttnvizError> {
    fs::write(path, render_html_string(salience, meta)).map_err(|source| AttnvizError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// `word,score` sidecar.
pub fn write_salience_csv(path: &Path, salience: &SalienceMap) -> Result<(), AttnvizError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["word", "score"])?;
    for (word, score) in salience.tokens.iter().zip(&salience.scores) {
        w.write_record([word.as_str(), &format!("{score:.6}")])?;
    }
    w.flush().map_err(|source| AttnvizError::Io {
        path: path.display().to_string(),
        source,
    })
}
