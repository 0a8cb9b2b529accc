//! AKI classifier fine-tuning: a linear two-way head on a note embedding,
//! trained end to end (or on a frozen encoder) under one of five
//! imbalance strategies, keeping the snapshot with the best validation AUC.

mod embed;
mod sampling;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use embed::{
    embed_note_pooling, embed_note_truncating, forward_note, note_backward, note_sequences, sample_sentences,
    NoteEmbedding, NoteForward,
};
pub use sampling::{class_weights, downsample, minority_per_batch, stratified_batches, upsample};

use crate::encoder::heads::{linear_loss, positive_probability, CLASSIFIER_PREFIX};
use crate::encoder::{init_tensor, is_head_tensor, EncoderError, ModelConfig, ParameterSet, Tensor};
use crate::evaluate::{auc, EvaluateError};
use crate::ingest::NoteDocument;
use crate::optim::{Adam, AdamConfig};
use crate::seed::{derive_index, derive_seed, rng_from};
use crate::tokenizer::{Tokenizer, TokenizerError};

#[derive(Debug, Error)]
pub enum FinetuneError {
    #[error("both classes must be present")]
    SingleClassData,
    #[error("invalid fine-tuning configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("no notes to {0}")]
    Empty(&'static str),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error("I/O error on {path}: {message}")]
    Io { path: String, message: String },
}

impl From<EvaluateError> for FinetuneError {
    fn from(e: EvaluateError) -> Self {
        match e {
            EvaluateError::SingleClassData => FinetuneError::SingleClassData,
            other => FinetuneError::InvalidConfig(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Stratified batches with class-weighted loss.
    Sbs,
    /// Majority down-sampled each epoch.
    Ds,
    /// Minority up-sampled each epoch.
    Us,
    /// Class-weighted loss only.
    Weight,
    /// Frozen encoder; only the linear head is trained.
    Static,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Sbs => "sbs",
            Strategy::Ds => "ds",
            Strategy::Us => "us",
            Strategy::Weight => "weight",
            Strategy::Static => "static",
        }
    }

    fn weighted(self) -> bool {
        matches!(self, Strategy::Sbs | Strategy::Weight)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "sbs" => Ok(Strategy::Sbs),
            "ds" => Ok(Strategy::Ds),
            "us" => Ok(Strategy::Us),
            "weight" => Ok(Strategy::Weight),
            "static" => Ok(Strategy::Static),
            _ => Err(format!("unknown strategy `{s}` (expected sbs, ds, us, weight or static)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DocMode {
    Truncating,
    Pooling,
}

impl DocMode {
    pub fn as_str(self) -> &'static str {
        match self {
            DocMode::Truncating => "truncating",
            DocMode::Pooling => "pooling",
        }
    }
}

impl fmt::Display for DocMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DocMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "truncating" => Ok(DocMode::Truncating),
            "pooling" => Ok(DocMode::Pooling),
            _ => Err(format!("unknown doc mode `{s}` (expected truncating or pooling)")),
        }
    }
}

/// How a sentence (or truncated note) becomes a vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SentenceEmbedding {
    /// Pooler output over the `[CLS]` state.
    #[default]
    Cls,
    /// Mean of all final token states.
    MeanTokens,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub strategy: Strategy,
    pub doc_mode: DocMode,
    pub batch_size: usize,
    pub epochs: usize,
    pub eval_every_batches: u64,
    /// Defaults to 512 when truncating and 32 when pooling.
    pub max_seq_len: Option<usize>,
    pub max_sentences: usize,
    pub learning_rate: f64,
    pub decision_threshold: f64,
    pub seed: u64,
    /// Overrides the stratified sampler's per-batch minority count.
    pub minority_per_batch: Option<usize>,
    pub sentence_embedding: SentenceEmbedding,
    /// Gradient-descent iterations of the frozen-encoder head.
    pub static_iterations: usize,
    /// Step size of the frozen-encoder head, relative to the inverse
    /// curvature bound of the logistic loss.
    pub static_step: f64,
    pub adam: AdamConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Sbs,
            doc_mode: DocMode::Pooling,
            batch_size: 4,
            epochs: 5,
            eval_every_batches: 500,
            max_seq_len: None,
            max_sentences: 180,
            learning_rate: 5e-5,
            decision_threshold: 0.5,
            seed: 0,
            minority_per_batch: None,
            sentence_embedding: SentenceEmbedding::Cls,
            static_iterations: 1000,
            static_step: 1.0,
            adam: AdamConfig::default(),
        }
    }
}

impl FinetuneConfig {
    pub fn effective_max_seq_len(&self) -> usize {
        self.max_seq_len.unwrap_or(match self.doc_mode {
            DocMode::Truncating => 512,
            DocMode::Pooling => 32,
        })
    }

    pub fn validate(&self) -> Result<(), FinetuneError> {
        let bad = |m: &str| Err(FinetuneError::InvalidConfig(m.into()));
        if self.batch_size == 0 || (self.strategy == Strategy::Sbs && self.batch_size < 2) {
            return bad("batch_size must be positive, and at least 2 for stratified batches");
        }
        if self.max_sentences == 0 {
            return bad("max_sentences must be at least 1");
        }
        if self.eval_every_batches == 0 {
            return bad("eval_every_batches must be positive");
        }
        if self.effective_max_seq_len() < 3 {
            return bad("max_seq_len must be at least 3");
        }
        if !(self.learning_rate > 0.0) || !(self.static_step > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(0.0..=1.0).contains(&self.decision_threshold) {
            return bad("decision_threshold must lie in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledNote {
    pub note: NoteDocument,
    pub label: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrainLogRow {
    pub step: u64,
    /// Mean batch loss since the previous evaluation.
    pub train_loss: f64,
    pub val_auc: f64,
    pub snapshot_taken: bool,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub params: ParameterSet<f32>,
    pub log: Vec<TrainLogRow>,
    pub best_val_auc: Option<f64>,
    pub best_step: Option<u64>,
    pub encoder_frozen: bool,
}

fn require_both_classes(notes: &[LabeledNote]) -> Result<(), FinetuneError> {
    let pos = notes.iter().filter(|n| n.label).count();
    if pos == 0 || pos == notes.len() {
        return Err(FinetuneError::SingleClassData);
    }
    Ok(())
}

/// Replaces the classifier head with a fresh draw seeded from the
/// fine-tuning seed.
pub fn reset_classifier(params: &mut ParameterSet<f32>, model: &ModelConfig, seed: u64) {
    let cfg = ModelConfig {
        seed: derive_seed(seed, "classifier"),
        ..model.clone()
    };
    for (name, shape) in model.expected_shapes() {
        if name.starts_with(CLASSIFIER_PREFIX) {
            params.insert(name.clone(), init_tensor(&name, &shape, &cfg));
        }
    }
}

/// AKI probability of each note, in input order.
pub fn predict_notes(
    params: &ParameterSet<f32>,
    model: &ModelConfig,
    tokenizer: &Tokenizer,
    config: &FinetuneConfig,
    notes: &[NoteDocument],
) -> Result<Vec<f64>, FinetuneError> {
    notes
        .par_iter()
        .map(|n| predict(params, model, tokenizer, config, n))
        .collect()
}

pub fn predict(
    params: &ParameterSet<f32>,
    model: &ModelConfig,
    tokenizer: &Tokenizer,
    config: &FinetuneConfig,
    note: &NoteDocument,
) -> Result<f64, FinetuneError> {
    let fwd = forward_note(params, model, tokenizer, config, note, false, 0)?;
    Ok(positive_probability(params, CLASSIFIER_PREFIX, &fwd.embedding.vector) as f64)
}

/// Note embeddings without dropout, in input order.
pub fn embed_notes(
    params: &ParameterSet<f32>,
    model: &ModelConfig,
    tokenizer: &Tokenizer,
    config: &FinetuneConfig,
    notes: &[NoteDocument],
) -> Result<Vec<NoteEmbedding>, FinetuneError> {
    notes
        .par_iter()
        .map(|n| Ok(forward_note(params, model, tokenizer, config, n, false, 0)?.embedding))
        .collect()
}

/// Full-batch gradient descent on the mean two-way cross-entropy of a
/// linear head over fixed embeddings, starting from `weight` (`dim × 2`)
/// and `bias` (2). The step is `step / L` with `L` a bound on the loss
/// curvature, so it is stable for any embedding scale.
pub fn static_train(
    embeddings: &[Vec<f32>],
    labels: &[bool],
    weight: &[f32],
    bias: &[f32],
    iterations: usize,
    step: f64,
) -> Result<(Vec<f32>, Vec<f32>), FinetuneError> {
    let pos = labels.iter().filter(|&&y| y).count();
    if pos == 0 || pos == labels.len() {
        return Err(FinetuneError::SingleClassData);
    }
    let dim = weight.len() / 2;
    let n = embeddings.len() as f64;
    let x: Vec<Vec<f64>> = embeddings.iter().map(|e| e.iter().map(|&v| v as f64).collect()).collect();
    let mut w: Vec<f64> = weight.iter().map(|&v| v as f64).collect();
    let mut b: Vec<f64> = bias.iter().map(|&v| v as f64).collect();
    let sq = x.iter().map(|r| r.iter().map(|v| v * v).sum::<f64>() + 1.0).sum::<f64>() / n;
    let lr = step / (0.5 * sq);
    for _ in 0..iterations {
        let mut gw = vec![0.0; w.len()];
        let mut gb = [0.0; 2];
        for (xi, &y) in x.iter().zip(labels) {
            let z0 = b[0] + (0..dim).map(|d| xi[d] * w[2 * d]).sum::<f64>();
            let z1 = b[1] + (0..dim).map(|d| xi[d] * w[2 * d + 1]).sum::<f64>();
            let p1 = 1.0 / (1.0 + (z0 - z1).exp());
            // d loss / d z1 = p1 − y, d loss / d z0 = −(p1 − y)
            let e = p1 - if y { 1.0 } else { 0.0 };
            gb[0] -= e;
            gb[1] += e;
            for d in 0..dim {
                gw[2 * d] -= e * xi[d];
                gw[2 * d + 1] += e * xi[d];
            }
        }
        for (wv, g) in w.iter_mut().zip(&gw) {
            *wv -= lr * g / n;
        }
        for (bv, g) in b.iter_mut().zip(gb) {
            *bv -= lr * g / n;
        }
    }
    Ok((w.iter().map(|&v| v as f32).collect(), b.iter().map(|&v| v as f32).collect()))
}

fn validation_auc(
    params: &ParameterSet<f32>,
    model: &ModelConfig,
    tokenizer: &Tokenizer,
    config: &FinetuneConfig,
    val: &[LabeledNote],
) -> Result<f64, FinetuneError> {
    let notes: Vec<NoteDocument> = val.iter().map(|n| n.note.clone()).collect();
    let labels: Vec<bool> = val.iter().map(|n| n.label).collect();
    let probs = predict_notes(params, model, tokenizer, config, &notes)?;
    Ok(auc(&labels, &probs)?)
}

/// Index order of one training epoch under the configured strategy.
fn epoch_batches(labels: &[bool], config: &FinetuneConfig, seed: u64) -> Result<Vec<Vec<usize>>, FinetuneError> {
    let mut rng = rng_from(derive_seed(seed, "order"));
    let mut order = match config.strategy {
        Strategy::Sbs => {
            return stratified_batches(labels, config.batch_size, config.minority_per_batch, seed);
        }
        Strategy::Ds => downsample(labels, seed)?,
        Strategy::Us => upsample(labels, seed)?,
        Strategy::Weight | Strategy::Static => (0..labels.len()).collect(),
    };
    order.shuffle(&mut rng);
    Ok(order.chunks(config.batch_size).map(<[usize]>::to_vec).collect())
}

/// Trains from `init` (the classifier head is always re-drawn) and returns
/// the parameters with the highest validation AUC seen at an evaluation
/// point (every `eval_every_batches` batches and after the last batch).
pub fn finetune_loop(
    init: &ParameterSet<f32>,
    model: &ModelConfig,
    tokenizer: &Tokenizer,
    train: &[LabeledNote],
    val: &[LabeledNote],
    config: &FinetuneConfig,
) -> Result<FinetuneOutcome, FinetuneError> {
    config.validate()?;
    model.validate()?;
    if train.is_empty() {
        return Err(FinetuneError::Empty("train on"));
    }
    if val.is_empty() {
        return Err(FinetuneError::Empty("validate on"));
    }
    require_both_classes(train)?;
    require_both_classes(val)?;
    let mut params = init.clone();
    model.check_params(&params)?;
    reset_classifier(&mut params, model, config.seed);
    let frozen = config.strategy == Strategy::Static;
    if config.epochs == 0 {
        return Ok(FinetuneOutcome {
            params,
            log: Vec::new(),
            best_val_auc: None,
            best_step: None,
            encoder_frozen: frozen,
        });
    }
    let labels: Vec<bool> = train.iter().map(|n| n.label).collect();

    if frozen {
        log::info!("static strategy: encoder frozen, training the linear head only");
        let notes: Vec<NoteDocument> = train.iter().map(|n| n.note.clone()).collect();
        let embeddings: Vec<Vec<f32>> = embed_notes(&params, model, tokenizer, config, &notes)?
            .into_iter()
            .map(|e| e.vector)
            .collect();
        let (w, b) = static_train(
            &embeddings,
            &labels,
            params.data("classifier.weight"),
            params.data("classifier.bias"),
            config.static_iterations * config.epochs,
            config.static_step,
        )?;
        params.insert("classifier.weight", Tensor::from_vec(&[model.hidden_dim, 2], w));
        params.insert("classifier.bias", Tensor::from_vec(&[2], b));
        let val_auc = validation_auc(&params, model, tokenizer, config, val)?;
        return Ok(FinetuneOutcome {
            params,
            log: vec![TrainLogRow {
                step: config.static_iterations as u64 * config.epochs as u64,
                train_loss: f64::NAN,
                val_auc,
                snapshot_taken: true,
            }],
            best_val_auc: Some(val_auc),
            best_step: Some(0),
            encoder_frozen: true,
        });
    }

    let weights = if config.strategy.weighted() {
        class_weights(&labels)?
    } else {
        [1.0, 1.0]
    };
    let mut optimizer = Adam::new(&params, config.adam.clone());
    let epoch_root = derive_seed(config.seed, "finetune/epoch");
    let dropout_root = derive_seed(config.seed, "finetune/dropout");
    let mut step = 0u64;
    let mut log_rows = Vec::new();
    let mut best: Option<(f64, u64, ParameterSet<f32>)> = None;
    let (mut loss_sum, mut loss_count) = (0.0, 0usize);
    let mut last_eval = 0u64;

    let mut evaluate = |params: &ParameterSet<f32>,
                        step: u64,
                        loss_sum: &mut f64,
                        loss_count: &mut usize,
                        best: &mut Option<(f64, u64, ParameterSet<f32>)>|
     -> Result<(), FinetuneError> {
        let val_auc = validation_auc(params, model, tokenizer, config, val)?;
        let improved = best.as_ref().is_none_or(|(b, _, _)| val_auc > *b);
        if improved {
            *best = Some((val_auc, step, params.clone()));
        }
        log::info!("step {step}: val AUC {val_auc:.4}{}", if improved { " (snapshot)" } else { "" });
        log_rows.push(TrainLogRow {
            step,
            train_loss: if *loss_count > 0 { *loss_sum / *loss_count as f64 } else { f64::NAN },
            val_auc,
            snapshot_taken: improved,
        });
        *loss_sum = 0.0;
        *loss_count = 0;
        Ok(())
    };

    for epoch in 0..config.epochs as u64 {
        let batches = epoch_batches(&labels, config, derive_index(epoch_root, epoch))?;
        for batch in batches {
            let step_seed = derive_index(dropout_root, step);
            let scale = 1.0 / batch.len() as f32;
            let parts: Vec<(f64, ParameterSet<f32>)> = batch
                .par_iter()
                .enumerate()
                .map(|(k, &i)| {
                    let ex = &train[i];
                    let fwd = forward_note(&params, model, tokenizer, config, &ex.note, true, derive_index(step_seed, k as u64))?;
                    let mut grads = params.zeros_like();
                    let w = weights[usize::from(ex.label)] as f32;
                    let (loss, d_vec) = linear_loss(
                        &params,
                        CLASSIFIER_PREFIX,
                        &fwd.embedding.vector,
                        usize::from(ex.label),
                        w * scale,
                        &mut grads,
                    );
                    note_backward(&params, model, config, &fwd, &d_vec, &mut grads);
                    Ok((w as f64 * loss as f64, grads))
                })
                .collect::<Result<_, FinetuneError>>()?;
            let mut grads = params.zeros_like();
            let mut loss = 0.0;
            for (l, g) in &parts {
                loss += l;
                grads.add_assign(g);
            }
            loss /= batch.len() as f64;
            step += 1;
            if !loss.is_finite() || !grads.all_finite() {
                return Err(FinetuneError::NonFiniteLoss { step });
            }
            optimizer.update(&mut params, &grads, config.learning_rate, |_| true);
            loss_sum += loss;
            loss_count += 1;
            if step % config.eval_every_batches == 0 {
                evaluate(&params, step, &mut loss_sum, &mut loss_count, &mut best)?;
                last_eval = step;
            }
        }
    }
    if last_eval != step {
        evaluate(&params, step, &mut loss_sum, &mut loss_count, &mut best)?;
    }
    let (best_auc, best_step, best_params) = best.expect("at least one evaluation ran");
    Ok(FinetuneOutcome {
        params: best_params,
        log: log_rows,
        best_val_auc: Some(best_auc),
        best_step: Some(best_step),
        encoder_frozen: false,
    })
}

/// True when every non-head tensor of `a` equals `b` bit for bit.
pub fn encoder_unchanged(a: &ParameterSet<f32>, b: &ParameterSet<f32>) -> bool {
    a.iter()
        .filter(|(n, _)| !is_head_tensor(n))
        .all(|(n, t)| b.get(n).is_some_and(|u| t.data.iter().zip(&u.data).all(|(x, y)| x.to_bits() == y.to_bits())))
}

fn io_err(path: &Path, e: &dyn fmt::Display) -> FinetuneError {
    FinetuneError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Writes `step,train_loss,val_auc,snapshot_taken`.
pub fn write_training_log(path: &Path, rows: &[TrainLogRow]) -> Result<(), FinetuneError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, &e))?;
    w.write_record(["step", "train_loss", "val_auc", "snapshot_taken"])
        .map_err(|e| io_err(path, &e))?;
    for r in rows {
        let num = |v: f64| if v.is_nan() { "nan".to_string() } else { v.to_string() };
        w.write_record([r.step.to_string(), num(r.train_loss), num(r.val_auc), r.snapshot_taken.to_string()])
            .map_err(|e| io_err(path, &e))?;
    }
    w.flush().map_err(|e| io_err(path, &e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub note_id: String,
    pub stay_id: String,
    pub probability: f64,
    pub hard_label: u8,
}

pub fn prediction_rows(notes: &[NoteDocument], probabilities: &[f64], threshold: f64) -> Vec<PredictionRow> {
    notes
        .iter()
        .zip(probabilities)
        .map(|(n, &p)| PredictionRow {
            note_id: n.note_id.clone(),
            stay_id: n.stay_id.clone(),
            probability: p,
            hard_label: u8::from(p >= threshold),
        })
        .collect()
}

/// Writes `note_id,stay_id,probability,hard_label`.
pub fn write_predictions(path: &Path, rows: &[PredictionRow]) -> Result<(), FinetuneError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, &e))?;
    for r in rows {
        w.serialize(r).map_err(|e| io_err(path, &e))?;
    }
    w.flush().map_err(|e| io_err(path, &e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRow>, FinetuneError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| io_err(path, &e))?;
    r.deserialize()
        .map(|row| row.map_err(|e| io_err(path, &e)))
        .collect()
}

#[cfg(test)]
mod tests;
