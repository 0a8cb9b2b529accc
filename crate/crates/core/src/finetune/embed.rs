//! Note embeddings: the pooled `[CLS]` state of the truncated note, or the
//! element-wise maximum over per-sentence embeddings.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::{DocMode, FinetuneConfig, FinetuneError, SentenceEmbedding};
use crate::encoder::{backward, forward_with_trace, EncoderOutput, ModelConfig, ParameterSet, Trace, Upstream};
use crate::ingest::{split_sentence_texts, NoteDocument};
use crate::seed::{derive_seed, rng_from};
use crate::tokenizer::{TokenizedSequence, Tokenizer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoteEmbedding {
    pub vector: Vec<f32>,
    pub provenance: DocMode,
    /// Pooling only: per dimension, the position (within `sentences`) of
    /// the sentence that supplied the maximum (first one on ties).
    pub contributing_sentence_per_dim: Option<Vec<usize>>,
    /// Pooling only: indices into the note's sentence list that were encoded.
    pub sentences: Vec<usize>,
}

/// Encoder inputs for a note: one truncated sequence, or one sequence per
/// (sampled) sentence. Returns the sequences and, for pooling, the indices
/// of the sentences used.
pub fn note_sequences(
    note: &NoteDocument,
    tokenizer: &Tokenizer,
    config: &FinetuneConfig,
) -> Result<(Vec<TokenizedSequence>, Vec<usize>), FinetuneError> {
    let max_len = config.effective_max_seq_len();
    match config.doc_mode {
        DocMode::Truncating => Ok((vec![tokenizer.encode_single(&note.text, max_len)?.trimmed()], vec![0])),
        DocMode::Pooling => {
            let mut sentences = split_sentence_texts(&note.text);
            if sentences.is_empty() {
                sentences.push(String::new());
            }
            let chosen = sample_sentences(sentences.len(), config.max_sentences, config.seed, &note.note_id);
            let seqs = chosen
                .iter()
                .map(|&i| Ok(tokenizer.encode_single(&sentences[i], max_len)?.trimmed()))
                .collect::<Result<Vec<_>, FinetuneError>>()?;
            Ok((seqs, chosen))
        }
    }
}

/// At most `max` of `n` indices, without replacement, in document order;
/// the draw depends only on the seed and the note id.
pub fn sample_sentences(n: usize, max: usize, seed: u64, note_id: &str) -> Vec<usize> {
    if n <= max {
        return (0..n).collect();
    }
    let mut rng = rng_from(derive_seed(seed, &format!("sentences/{note_id}")));
    let mut idx = sample(&mut rng, n, max).into_vec();
    idx.sort_unstable();
    idx
}

fn sentence_vector(out: &EncoderOutput<f32>, mode: SentenceEmbedding) -> Vec<f32> {
    match mode {
        SentenceEmbedding::Cls => out.pooled.clone(),
        SentenceEmbedding::MeanTokens => {
            let mut v = vec![0.0f32; out.hidden_dim];
            for i in 0..out.seq_len {
                for (a, &b) in v.iter_mut().zip(out.hidden(i)) {
                    *a += b;
                }
            }
            let n = out.seq_len as f32;
            v.iter_mut().for_each(|a| *a /= n);
            v
        }
    }
}

/// A note's forward pass, kept for the backward pass and for attention
/// inspection.
pub struct NoteForward {
    pub embedding: NoteEmbedding,
    pub outputs: Vec<EncoderOutput<f32>>,
    pub sequences: Vec<TokenizedSequence>,
    traces: Vec<Trace<f32>>,
}

pub fn forward_note(
    params: &ParameterSet<f32>,
    model: &ModelConfig,
    tokenizer: &Tokenizer,
    config: &FinetuneConfig,
    note: &NoteDocument,
    train_mode: bool,
    dropout_seed: u64,
) -> Result<NoteForward, FinetuneError> {
    let (sequences, sentences) = note_sequences(note, tokenizer, config)?;
    let (outputs, traces): (Vec<_>, Vec<_>) = forward_with_trace(params, model, &sequences, train_mode, dropout_seed)?
        .into_iter()
        .unzip();
    let vectors: Vec<Vec<f32>> = outputs.iter().map(|o| sentence_vector(o, config.sentence_embedding)).collect();
    let embedding = match config.doc_mode {
        DocMode::Truncating => NoteEmbedding {
            vector: vectors[0].clone(),
            provenance: DocMode::Truncating,
            contributing_sentence_per_dim: None,
            sentences,
        },
        DocMode::Pooling => {
            let h = model.hidden_dim;
            let mut vector = vec![f32::NEG_INFINITY; h];
            let mut argmax = vec![0usize; h];
            for (k, v) in vectors.iter().enumerate() {
                for d in 0..h {
                    if v[d] > vector[d] {
                        vector[d] = v[d];
                        argmax[d] = k;
                    }
                }
            }
            NoteEmbedding {
                vector,
                provenance: DocMode::Pooling,
                contributing_sentence_per_dim: Some(argmax),
                sentences,
            }
        }
    };
    Ok(NoteForward {
        embedding,
        outputs,
        sequences,
        traces,
    })
}

/// Accumulates into `grads` the encoder gradient given `d_vector`, the
/// gradient with respect to the note embedding. Under pooling only the
/// sentence holding each dimension's maximum receives that dimension's
/// gradient.
pub fn note_backward(
    params: &ParameterSet<f32>,
    model: &ModelConfig,
    config: &FinetuneConfig,
    forward: &NoteForward,
    d_vector: &[f32],
    grads: &mut ParameterSet<f32>,
) {
    let h = model.hidden_dim;
    for (k, (trace, out)) in forward.traces.iter().zip(&forward.outputs).enumerate() {
        let mut d = vec![0.0f32; h];
        match &forward.embedding.contributing_sentence_per_dim {
            Some(argmax) => {
                for dim in 0..h {
                    if argmax[dim] == k {
                        d[dim] = d_vector[dim];
                    }
                }
            }
            None => d.copy_from_slice(d_vector),
        }
        if d.iter().all(|&v| v == 0.0) {
            continue;
        }
        let upstream = match config.sentence_embedding {
            SentenceEmbedding::Cls => Upstream {
                d_hidden: None,
                d_pooled: Some(d),
            },
            SentenceEmbedding::MeanTokens => {
                let n = out.seq_len as f32;
                let row: Vec<f32> = d.iter().map(|v| v / n).collect();
                Upstream {
                    d_hidden: Some(row.repeat(out.seq_len)),
                    d_pooled: None,
                }
            }
        };
        backward(params, model, trace, &upstream, grads);
    }
}

/// Pooled `[CLS]` embedding of the note truncated to the configured length.
pub fn embed_note_truncating(
    params: &ParameterSet<f32>,
    model: &ModelConfig,
    tokenizer: &Tokenizer,
    note: &NoteDocument,
    config: &FinetuneConfig,
) -> Result<NoteEmbedding, FinetuneError> {
    let cfg = FinetuneConfig {
        doc_mode: DocMode::Truncating,
        ..config.clone()
    };
    Ok(forward_note(params, model, tokenizer, &cfg, note, false, 0)?.embedding)
}

/// Element-wise maximum of the sentence embeddings.
pub fn embed_note_pooling(
    params: &ParameterSet<f32>,
    model: &ModelConfig,
    tokenizer: &Tokenizer,
    note: &NoteDocument,
    config: &FinetuneConfig,
) -> Result<NoteEmbedding, FinetuneError> {
    let cfg = FinetuneConfig {
        doc_mode: DocMode::Pooling,
        ..config.clone()
    };
    Ok(forward_note(params, model, tokenizer, &cfg, note, false, 0)?.embedding)
}
