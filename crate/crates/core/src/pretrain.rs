//! Masked-token and next-sentence pre-training: pair construction, masking,
//! the combined loss, and a resumable training loop.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::heads::{linear_loss, mlm_loss, NSP_PREFIX};
use crate::encoder::{
    backward, forward_with_trace, init_tensor, save_checkpoint_bundle, CheckpointBundle, EncoderError, ModelConfig,
    ParameterSet, Upstream,
};
use crate::optim::{Adam, AdamConfig};
use crate::seed::{derive_index, derive_seed, rng_from};
use crate::tokenizer::{TokenizedSequence, Tokenizer, TokenizerError, Vocabulary};

#[derive(Debug, Error)]
pub enum PretrainError {
    #[error("insufficient corpus: {0}")]
    InsufficientCorpus(String),
    #[error("invalid pre-training configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("empty batch")]
    EmptyBatch,
    #[error("checkpoint is missing optimizer state `{0}`")]
    MissingState(String),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error("I/O error on {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskingConfig {
    pub select_rate: f64,
    pub mask_fraction: f64,
    pub random_fraction: f64,
    pub keep_fraction: f64,
    pub seed: u64,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        Self {
            select_rate: 0.15,
            mask_fraction: 0.8,
            random_fraction: 0.1,
            keep_fraction: 0.1,
            seed: 0,
        }
    }
}

impl MaskingConfig {
    pub fn validate(&self) -> Result<(), PretrainError> {
        let bad = |m: &str| Err(PretrainError::InvalidConfig(m.into()));
        if !(self.select_rate > 0.0 && self.select_rate <= 1.0) {
            return bad("select_rate must lie in (0, 1]");
        }
        let parts = [self.mask_fraction, self.random_fraction, self.keep_fraction];
        if parts.iter().any(|&f| !(0.0..=1.0).contains(&f)) {
            return bad("masking fractions must lie in [0, 1]");
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("mask, random and keep fractions must sum to 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub max_seq_len: usize,
    pub batch_size: usize,
    pub epochs: usize,
    /// Optional cap on optimizer steps across all epochs.
    pub max_steps: Option<u64>,
    pub learning_rate: f64,
    pub seed: u64,
    /// Steps between intermediate checkpoints; `0` writes none.
    pub checkpoint_every: u64,
    pub adam: AdamConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            max_seq_len: 128,
            batch_size: 8,
            epochs: 1,
            max_steps: None,
            learning_rate: 3e-5,
            seed: 0,
            checkpoint_every: 1000,
            adam: AdamConfig::default(),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<(), PretrainError> {
        let bad = |m: &str| Err(PretrainError::InvalidConfig(m.into()));
        if self.max_seq_len < 5 {
            return bad("max_seq_len must be at least 5");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NspLabel {
    IsNext,
    NotNext,
}

impl NspLabel {
    /// Class index of the two-way head.
    pub fn target(self) -> usize {
        match self {
            NspLabel::IsNext => 0,
            NspLabel::NotNext => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NspPair {
    pub sent_a: String,
    pub sent_b: String,
    pub label: NspLabel,
}

/// One pair per adjacent sentence pair within a note. With probability 0.5
/// the second sentence is replaced by a uniform draw from the sentences of
/// other notes; with a single note, by a non-adjacent sentence of the same
/// note, and when none exists the true successor is kept.
pub fn create_nsp_pairs(notes: &[Vec<String>], seed: u64) -> Result<Vec<NspPair>, PretrainError> {
    let total_sentences: usize = notes.iter().map(Vec::len).sum();
    if !notes.iter().any(|n| n.len() >= 2) {
        return Err(PretrainError::InsufficientCorpus(
            "no note has two or more sentences".into(),
        ));
    }
    let flat: Vec<(usize, usize)> = notes
        .iter()
        .enumerate()
        .flat_map(|(n, s)| (0..s.len()).map(move |i| (n, i)))
        .collect();
    let mut rng = rng_from(derive_seed(seed, "nsp"));
    let mut pairs = Vec::new();
    for (n, sents) in notes.iter().enumerate() {
        let others = total_sentences - sents.len();
        for i in 0..sents.len().saturating_sub(1) {
            let sent_a = sents[i].clone();
            if rng.random::<f64>() < 0.5 {
                pairs.push(NspPair {
                    sent_a,
                    sent_b: sents[i + 1].clone(),
                    label: NspLabel::IsNext,
                });
                continue;
            }
            let replacement = if others > 0 {
                loop {
                    let (m, j) = flat[rng.random_range(0..flat.len())];
                    if m != n {
                        break Some(notes[m][j].clone());
                    }
                }
            } else {
                let candidates: Vec<usize> = (0..sents.len()).filter(|&j| j != i && j != i + 1).collect();
                candidates
                    .get(rng.random_range(0..candidates.len().max(1)))
                    .map(|&j| sents[j].clone())
            };
            pairs.push(match replacement {
                Some(sent_b) => NspPair {
                    sent_a,
                    sent_b,
                    label: NspLabel::NotNext,
                },
                None => NspPair {
                    sent_a,
                    sent_b: sents[i + 1].clone(),
                    label: NspLabel::IsNext,
                },
            });
        }
    }
    Ok(pairs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainExample {
    pub seq: TokenizedSequence,
    /// Original id at each selected position, `None` (ignore) elsewhere.
    pub mlm_targets: Vec<Option<u32>>,
    pub nsp_label: NspLabel,
}

impl PretrainExample {
    pub fn targets(&self) -> Vec<(usize, u32)> {
        self.mlm_targets
            .iter()
            .enumerate()
            .filter_map(|(i, t)| t.map(|id| (i, id)))
            .collect()
    }
}

/// Selects each real non-special position with probability `select_rate`
/// (forcing one if none is drawn) and corrupts selections 80/10/10 style.
/// Attention mask and segments are untouched.
pub fn apply_masking<R: Rng>(
    seq: &TokenizedSequence,
    nsp_label: NspLabel,
    vocab: &Vocabulary,
    config: &MaskingConfig,
    rng: &mut R,
) -> PretrainExample {
    let candidates: Vec<usize> = (0..seq.len())
        .filter(|&i| seq.attention_mask[i] == 1 && !vocab.is_special(seq.ids[i]))
        .collect();
    let mut selected: Vec<usize> = candidates
        .iter()
        .copied()
        .filter(|_| rng.random::<f64>() < config.select_rate)
        .collect();
    if selected.is_empty() && !candidates.is_empty() {
        selected.push(candidates[rng.random_range(0..candidates.len())]);
    }
    let pool = vocab.non_special_ids();
    let mut out = seq.clone();
    let mut targets = vec![None; seq.len()];
    for i in selected {
        targets[i] = Some(seq.ids[i]);
        let u: f64 = rng.random();
        let replacement = if u < config.mask_fraction {
            Some(vocab.mask_id())
        } else if u < config.mask_fraction + config.random_fraction && !pool.is_empty() {
            Some(pool[rng.random_range(0..pool.len())])
        } else {
            None
        };
        if let Some(id) = replacement {
            out.ids[i] = id;
            out.tokens[i] = vocab.token(id).unwrap_or_default().to_string();
        }
    }
    PretrainExample {
        seq: out,
        mlm_targets: targets,
        nsp_label,
    }
}

/// Examples of one epoch: pairs and masks are drawn from seeds derived from
/// `(seed, epoch)`, in corpus order.
pub fn build_examples(
    notes: &[Vec<String>],
    tokenizer: &Tokenizer,
    config: &PretrainConfig,
    masking: &MaskingConfig,
    epoch: u64,
) -> Result<Vec<PretrainExample>, PretrainError> {
    let epoch_seed = derive_index(derive_seed(config.seed, "pretrain/epoch"), epoch);
    let pairs = create_nsp_pairs(notes, epoch_seed)?;
    let mask_seed = derive_index(derive_seed(masking.seed, "masking"), epoch_seed);
    pairs
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let seq = tokenizer.encode_pair(&p.sent_a, &p.sent_b, config.max_seq_len)?;
            let mut rng = rng_from(derive_index(mask_seed, i as u64));
            Ok(apply_masking(&seq, p.label, &tokenizer.vocab, masking, &mut rng))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepLosses {
    pub mlm: f64,
    pub nsp: f64,
}

impl StepLosses {
    pub fn total(&self) -> f64 {
        self.mlm + self.nsp
    }
}

/// Mean masked-position cross-entropy plus mean next-sentence
/// cross-entropy over the batch, and the gradient of their sum.
pub fn pretrain_losses(
    params: &ParameterSet<f32>,
    config: &ModelConfig,
    batch: &[PretrainExample],
    train_mode: bool,
    dropout_seed: u64,
) -> Result<(StepLosses, ParameterSet<f32>), PretrainError> {
    if batch.is_empty() {
        return Err(PretrainError::EmptyBatch);
    }
    let seqs: Vec<TokenizedSequence> = batch.iter().map(|e| e.seq.trimmed()).collect();
    let traced = forward_with_trace(params, config, &seqs, train_mode, dropout_seed)?;
    let total_masked: usize = batch.iter().map(|e| e.mlm_targets.iter().flatten().count()).sum();
    let mlm_scale = if total_masked > 0 { 1.0 / total_masked as f32 } else { 0.0 };
    let nsp_scale = 1.0 / batch.len() as f32;

    let parts: Vec<(f64, f64, ParameterSet<f32>)> = traced
        .par_iter()
        .zip(batch)
        .map(|((out, trace), ex)| {
            let mut grads = params.zeros_like();
            let (mlm, d_hidden) = mlm_loss(params, config, &out.hidden_states, &ex.targets(), mlm_scale, &mut grads);
            let (nsp, d_pooled) = linear_loss(params, NSP_PREFIX, &out.pooled, ex.nsp_label.target(), nsp_scale, &mut grads);
            let up = Upstream {
                d_hidden: Some(d_hidden),
                d_pooled: Some(d_pooled),
            };
            backward(params, config, trace, &up, &mut grads);
            (mlm as f64, nsp as f64, grads)
        })
        .collect();

    let mut grads = params.zeros_like();
    let (mut mlm, mut nsp) = (0.0, 0.0);
    for (m, n, g) in &parts {
        mlm += m;
        nsp += n;
        grads.add_assign(g);
    }
    let losses = StepLosses {
        mlm: if total_masked > 0 { mlm / total_masked as f64 } else { 0.0 },
        nsp: nsp / batch.len() as f64,
    };
    Ok((losses, grads))
}

/// Parameters, optimizer moments and the number of updates applied.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ParameterSet<f32>,
    pub optimizer: Adam,
    pub step: u64,
}

const ADAM_M: &str = "adam_m";
const ADAM_V: &str = "adam_v";

impl TrainState {
    /// Fresh optimizer state; missing task heads are initialized.
    pub fn new(mut params: ParameterSet<f32>, model: &ModelConfig, adam: AdamConfig) -> Self {
        for (name, shape) in model.expected_shapes() {
            if !params.contains(&name) {
                params.insert(name.clone(), init_tensor(&name, &shape, model));
            }
        }
        let optimizer = Adam::new(&params, adam);
        Self {
            params,
            optimizer,
            step: 0,
        }
    }

    pub fn to_bundle(&self, model: &ModelConfig) -> CheckpointBundle {
        let mut bundle = CheckpointBundle {
            config: model.clone(),
            params: self.params.clone(),
            ..CheckpointBundle::default()
        };
        bundle.aux.insert(ADAM_M.into(), self.optimizer.m.clone());
        bundle.aux.insert(ADAM_V.into(), self.optimizer.v.clone());
        bundle.meta.insert("step".into(), serde_json::json!(self.step));
        bundle
    }

    /// Restores a state written by [`TrainState::to_bundle`].
    pub fn from_bundle(bundle: CheckpointBundle, adam: AdamConfig) -> Result<Self, PretrainError> {
        let step = bundle
            .meta
            .get("step")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| PretrainError::MissingState("step".into()))?;
        let mut aux = bundle.aux;
        let m = aux.remove(ADAM_M).ok_or_else(|| PretrainError::MissingState(ADAM_M.into()))?;
        let v = aux.remove(ADAM_V).ok_or_else(|| PretrainError::MissingState(ADAM_V.into()))?;
        Ok(Self {
            params: bundle.params,
            optimizer: Adam {
                config: adam,
                m,
                v,
                step,
            },
            step,
        })
    }
}

/// Applies one optimizer update on `batch`.
pub fn pretrain_step(
    state: &mut TrainState,
    model: &ModelConfig,
    batch: &[PretrainExample],
    learning_rate: f64,
    dropout_seed: u64,
) -> Result<StepLosses, PretrainError> {
    let (losses, grads) = pretrain_losses(&state.params, model, batch, true, dropout_seed)?;
    if !losses.total().is_finite() || !grads.all_finite() {
        return Err(PretrainError::NonFiniteLoss { step: state.step + 1 });
    }
    state.optimizer.update(&mut state.params, &grads, learning_rate, |_| true);
    state.step += 1;
    Ok(losses)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossRow {
    pub step: u64,
    pub mlm_loss: f64,
    pub nsp_loss: f64,
    pub total: f64,
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("pretrain-step{step:07}.json"))
}

/// Runs from `state.step` until `epochs` full passes (or `max_steps`) are
/// done. Epoch `e` shuffles its examples with a seed derived from `e`, so a
/// run resumed from any intermediate state continues identically.
pub fn pretrain_loop(
    notes: &[Vec<String>],
    tokenizer: &Tokenizer,
    model: &ModelConfig,
    mut state: TrainState,
    config: &PretrainConfig,
    masking: &MaskingConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<(TrainState, Vec<LossRow>), PretrainError> {
    config.validate()?;
    masking.validate()?;
    model.validate()?;
    if model.max_position < config.max_seq_len {
        return Err(PretrainError::InvalidConfig(
            "max_seq_len exceeds the model's max_position".into(),
        ));
    }
    let mut rows = Vec::new();
    if config.epochs == 0 {
        return Ok((state, rows));
    }
    let n_pairs = create_nsp_pairs(notes, 0)?.len() as u64;
    let steps_per_epoch = n_pairs.div_ceil(config.batch_size as u64);
    let mut last = steps_per_epoch * config.epochs as u64;
    if let Some(cap) = config.max_steps {
        last = last.min(cap);
    }
    let dropout_root = derive_seed(config.seed, "pretrain/dropout");
    let shuffle_root = derive_seed(config.seed, "pretrain/shuffle");

    while state.step < last {
        let epoch = state.step / steps_per_epoch;
        let examples = build_examples(notes, tokenizer, config, masking, epoch)?;
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut rng_from(derive_index(shuffle_root, epoch)));
        let mut b = (state.step % steps_per_epoch) as usize;
        while state.step < last && state.step < (epoch + 1) * steps_per_epoch {
            let lo = b * config.batch_size;
            let hi = (lo + config.batch_size).min(order.len());
            let batch: Vec<PretrainExample> = order[lo..hi].iter().map(|&i| examples[i].clone()).collect();
            let dropout_seed = derive_index(dropout_root, state.step);
            let losses = pretrain_step(&mut state, model, &batch, config.learning_rate, dropout_seed)?;
            log::debug!("pretrain step {} mlm {:.4} nsp {:.4}", state.step, losses.mlm, losses.nsp);
            rows.push(LossRow {
                step: state.step,
                mlm_loss: losses.mlm,
                nsp_loss: losses.nsp,
                total: losses.total(),
            });
            if let Some(dir) = checkpoint_dir {
                if config.checkpoint_every > 0 && state.step % config.checkpoint_every == 0 {
                    save_checkpoint_bundle(&checkpoint_path(dir, state.step), &state.to_bundle(model))?;
                }
            }
            b += 1;
        }
    }
    Ok((state, rows))
}

/// Writes `step,mlm_loss,nsp_loss,total`.
pub fn write_loss_csv(path: &Path, rows: &[LossRow]) -> Result<(), PretrainError> {
    let err = |e: &dyn std::fmt::Display| PretrainError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(|e| err(&e))?;
    for r in rows {
        w.serialize(r).map_err(|e| err(&e))?;
    }
    w.flush().map_err(|e| err(&e))
}
