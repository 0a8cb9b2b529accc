//! Micro-scale bidirectional transformer encoder (BERT layout, post-LN,
//! GELU feed-forward, learned absolute positions) with exact backpropagation,
//! task heads, and a portable checkpoint format.

mod checkpoint;
mod float;
pub mod heads;
mod model;
pub mod ops;
mod tensor;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{
    import_initialization, load_checkpoint, load_checkpoint_bundle, save_checkpoint, save_checkpoint_bundle,
    CheckpointBundle, ImportReport,
};
pub use float::Float;
pub use model::{
    backward, backward_batch, forward, forward_sequence, forward_with_trace, init_params, init_tensor, EncoderOutput,
    Trace, Upstream,
};
pub use tensor::{ParameterSet, Tensor};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("token id {id} out of range for vocabulary of {vocab_size}")]
    IdOutOfRange { id: u32, vocab_size: usize },
    #[error("segment id {0} out of range")]
    SegmentOutOfRange(u8),
    #[error("sequence of length {len} exceeds max_position {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("empty sequence")]
    EmptySequence,
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("missing tensor `{0}`")]
    MissingTensor(String),
    #[error("incompatible architecture: {0}")]
    IncompatibleArchitecture(String),
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub hidden_dim: usize,
    pub ff_dim: usize,
    pub vocab_size: usize,
    pub max_position: usize,
    pub type_vocab: usize,
    pub dropout_rate: f64,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            num_heads: 2,
            hidden_dim: 32,
            ff_dim: 64,
            vocab_size: 512,
            max_position: 512,
            type_vocab: 2,
            dropout_rate: 0.1,
            init_std: 0.02,
            seed: 0,
        }
    }
}

/// Prefixes of task-head tensors; everything else is the shared encoder.
pub const HEAD_PREFIXES: [&str; 3] = ["mlm.", "nsp.", "classifier."];

pub fn is_head_tensor(name: &str) -> bool {
    HEAD_PREFIXES.iter().any(|p| name.starts_with(p))
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        let bad = |m: &str| Err(EncoderError::InvalidConfig(m.to_string()));
        if self.num_layers == 0 || self.num_heads == 0 || self.hidden_dim == 0 || self.ff_dim == 0 {
            return bad("layer, head, hidden and feed-forward sizes must be positive");
        }
        if self.hidden_dim % self.num_heads != 0 {
            return bad("hidden_dim must be divisible by num_heads");
        }
        if self.vocab_size == 0 || self.max_position == 0 || self.type_vocab == 0 {
            return bad("vocab_size, max_position and type_vocab must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate must lie in [0, 1)");
        }
        if !(self.init_std > 0.0) {
            return bad("init_std must be positive");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    /// Architecture fields only (ignores dropout, init and seed).
    pub fn same_architecture(&self, other: &ModelConfig) -> bool {
        (self.num_layers, self.num_heads, self.hidden_dim, self.ff_dim, self.vocab_size, self.max_position, self.type_vocab)
            == (other.num_layers, other.num_heads, other.hidden_dim, other.ff_dim, other.vocab_size, other.max_position, other.type_vocab)
    }

    /// Name and shape of every tensor the model owns, heads included.
    pub fn expected_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let (h, f, v) = (self.hidden_dim, self.ff_dim, self.vocab_size);
        let mut s = BTreeMap::new();
        let mut add = |name: String, shape: Vec<usize>| {
            s.insert(name, shape);
        };
        add("embeddings.word".into(), vec![v, h]);
        add("embeddings.position".into(), vec![self.max_position, h]);
        add("embeddings.segment".into(), vec![self.type_vocab, h]);
        add("embeddings.ln.gamma".into(), vec![h]);
        add("embeddings.ln.beta".into(), vec![h]);
        for l in 0..self.num_layers {
            for proj in ["query", "key", "value", "output"] {
                add(format!("layer.{l}.attention.{proj}.weight"), vec![h, h]);
                add(format!("layer.{l}.attention.{proj}.bias"), vec![h]);
            }
            add(format!("layer.{l}.attention.ln.gamma"), vec![h]);
            add(format!("layer.{l}.attention.ln.beta"), vec![h]);
            add(format!("layer.{l}.ffn.intermediate.weight"), vec![h, f]);
            add(format!("layer.{l}.ffn.intermediate.bias"), vec![f]);
            add(format!("layer.{l}.ffn.output.weight"), vec![f, h]);
            add(format!("layer.{l}.ffn.output.bias"), vec![h]);
            add(format!("layer.{l}.ffn.ln.gamma"), vec![h]);
            add(format!("layer.{l}.ffn.ln.beta"), vec![h]);
        }
        add("pooler.weight".into(), vec![h, h]);
        add("pooler.bias".into(), vec![h]);
        add("mlm.transform.weight".into(), vec![h, h]);
        add("mlm.transform.bias".into(), vec![h]);
        add("mlm.ln.gamma".into(), vec![h]);
        add("mlm.ln.beta".into(), vec![h]);
        add("mlm.decoder.weight".into(), vec![h, v]);
        add("mlm.decoder.bias".into(), vec![v]);
        add("nsp.weight".into(), vec![h, 2]);
        add("nsp.bias".into(), vec![2]);
        add("classifier.weight".into(), vec![h, 2]);
        add("classifier.bias".into(), vec![2]);
        s
    }

    /// Checks every present tensor against its expected shape and that no
    /// shared-encoder tensor is missing. Head tensors may be absent.
    pub fn check_params<T: Float>(&self, params: &ParameterSet<T>) -> Result<(), EncoderError> {
        let expected = self.expected_shapes();
        for (name, t) in params.iter() {
            match expected.get(name) {
                Some(shape) if *shape == t.shape => {}
                Some(shape) => {
                    return Err(EncoderError::ShapeMismatch {
                        name: name.clone(),
                        expected: shape.clone(),
                        found: t.shape.clone(),
                    })
                }
                None => return Err(EncoderError::CorruptCheckpoint(format!("unknown tensor `{name}`"))),
            }
        }
        for name in expected.keys().filter(|n| !is_head_tensor(n)) {
            if !params.contains(name) {
                return Err(EncoderError::MissingTensor(name.clone()));
            }
        }
        Ok(())
    }
}
