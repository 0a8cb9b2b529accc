//! Checkpoints: a JSON manifest (config, tensor table, metadata) next to a
//! `.bin` blob of little-endian `f32` values.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{init_tensor, is_head_tensor, EncoderError, ModelConfig, ParameterSet, Tensor};

const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    /// Byte offset into the blob.
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: ModelConfig,
    blob: String,
    blob_bytes: u64,
    checksum: String,
    tensors: Vec<TensorEntry>,
    /// Auxiliary tensor groups (optimizer state), keyed `group/name`.
    aux_tensors: Vec<TensorEntry>,
    meta: BTreeMap<String, serde_json::Value>,
}

/// Parameters plus optional auxiliary state, enough to resume training
/// exactly.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CheckpointBundle {
    pub config: ModelConfig,
    pub params: ParameterSet<f32>,
    pub aux: BTreeMap<String, ParameterSet<f32>>,
    pub meta: BTreeMap<String, serde_json::Value>,
}

fn blob_path(path: &Path) -> PathBuf {
    path.with_extension("bin")
}

fn checksum(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn append(blob: &mut Vec<u8>, entries: &mut Vec<TensorEntry>, name: String, t: &Tensor<f32>) {
    entries.push(TensorEntry {
        name,
        shape: t.shape.clone(),
        dtype: "f32".into(),
        offset: blob.len() as u64,
    });
    for v in &t.data {
        blob.extend_from_slice(&v.to_le_bytes());
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), EncoderError> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_checkpoint_bundle(path: &Path, bundle: &CheckpointBundle) -> Result<(), EncoderError> {
    bundle.config.validate()?;
    bundle.config.check_params(&bundle.params)?;
    let mut blob = Vec::with_capacity(bundle.params.num_elements() * 4);
    let mut tensors = Vec::new();
    for (name, t) in bundle.params.iter() {
        append(&mut blob, &mut tensors, name.clone(), t);
    }
    let mut aux_tensors = Vec::new();
    for (group, set) in &bundle.aux {
        for (name, t) in set.iter() {
            append(&mut blob, &mut aux_tensors, format!("{group}/{name}"), t);
        }
    }
    let blob_file = blob_path(path);
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: bundle.config.clone(),
        blob: blob_file
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_string(),
        blob_bytes: blob.len() as u64,
        checksum: checksum(&blob),
        tensors,
        aux_tensors,
        meta: bundle.meta.clone(),
    };
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| EncoderError::CorruptCheckpoint(e.to_string()))?;
    write_atomic(&blob_file, &blob)?;
    write_atomic(path, &json)
}

pub fn save_checkpoint(path: &Path, params: &ParameterSet<f32>, config: &ModelConfig) -> Result<(), EncoderError> {
    save_checkpoint_bundle(
        path,
        &CheckpointBundle {
            config: config.clone(),
            params: params.clone(),
            ..CheckpointBundle::default()
        },
    )
}

fn read_tensor(blob: &[u8], e: &TensorEntry) -> Result<Tensor<f32>, EncoderError> {
    if e.dtype != "f32" {
        return Err(EncoderError::CorruptCheckpoint(format!("unsupported dtype `{}` for `{}`", e.dtype, e.name)));
    }
    let n: usize = e.shape.iter().product();
    let start = usize::try_from(e.offset).map_err(|_| EncoderError::CorruptCheckpoint("offset overflow".into()))?;
    let end = start
        .checked_add(n * 4)
        .filter(|&end| end <= blob.len())
        .ok_or_else(|| EncoderError::CorruptCheckpoint(format!("tensor `{}` extends past end of blob", e.name)))?;
    let data = blob[start..end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Tensor::from_vec(&e.shape, data))
}

pub fn load_checkpoint_bundle(path: &Path) -> Result<CheckpointBundle, EncoderError> {
    let json = fs::read(path)?;
    let manifest: Manifest =
        serde_json::from_slice(&json).map_err(|e| EncoderError::CorruptCheckpoint(format!("manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(EncoderError::CorruptCheckpoint(format!(
            "unsupported format version {}",
            manifest.format_version
        )));
    }
    let blob_file = path.parent().unwrap_or(Path::new(".")).join(&manifest.blob);
    let blob = fs::read(&blob_file)?;
    if blob.len() as u64 != manifest.blob_bytes {
        return Err(EncoderError::CorruptCheckpoint(format!(
            "blob holds {} bytes, manifest declares {}",
            blob.len(),
            manifest.blob_bytes
        )));
    }
    if checksum(&blob) != manifest.checksum {
        return Err(EncoderError::CorruptCheckpoint("checksum mismatch".into()));
    }
    manifest.config.validate()?;

    let mut params = ParameterSet::new();
    for e in &manifest.tensors {
        params.insert(e.name.clone(), read_tensor(&blob, e)?);
    }
    manifest.config.check_params(&params)?;
    if !params.all_finite() {
        return Err(EncoderError::CorruptCheckpoint("non-finite parameter values".into()));
    }
    let mut aux: BTreeMap<String, ParameterSet<f32>> = BTreeMap::new();
    for e in &manifest.aux_tensors {
        let (group, name) = e
            .name
            .split_once('/')
            .ok_or_else(|| EncoderError::CorruptCheckpoint(format!("aux tensor `{}` lacks a group", e.name)))?;
        aux.entry(group.to_string())
            .or_default()
            .insert(name.to_string(), read_tensor(&blob, e)?);
    }
    Ok(CheckpointBundle {
        config: manifest.config,
        params,
        aux,
        meta: manifest.meta,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<(ParameterSet<f32>, ModelConfig), EncoderError> {
    let b = load_checkpoint_bundle(path)?;
    Ok((b.params, b.config))
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct ImportReport {
    pub copied: Vec<String>,
    pub initialized: Vec<String>,
}

/// Builds parameters for `target` from a checkpoint of the same encoder
/// architecture: shared tensors are copied, task heads are copied when
/// present and freshly initialized (from `target.seed`) otherwise.
pub fn import_initialization(
    target: &ModelConfig,
    source_params: &ParameterSet<f32>,
    source_config: &ModelConfig,
) -> Result<(ParameterSet<f32>, ImportReport), EncoderError> {
    target.validate()?;
    if !target.same_architecture(source_config) {
        return Err(EncoderError::IncompatibleArchitecture(format!(
            "checkpoint {}L/{}H/{}d/ff{}/V{}/P{}, target {}L/{}H/{}d/ff{}/V{}/P{}",
            source_config.num_layers,
            source_config.num_heads,
            source_config.hidden_dim,
            source_config.ff_dim,
            source_config.vocab_size,
            source_config.max_position,
            target.num_layers,
            target.num_heads,
            target.hidden_dim,
            target.ff_dim,
            target.vocab_size,
            target.max_position,
        )));
    }
    source_config.check_params(source_params)?;
    let mut params = ParameterSet::new();
    let mut report = ImportReport::default();
    for (name, shape) in target.expected_shapes() {
        match source_params.get(&name) {
            Some(t) => {
                params.insert(name.clone(), t.clone());
                report.copied.push(name);
            }
            None => {
                debug_assert!(is_head_tensor(&name));
                params.insert(name.clone(), init_tensor(&name, &shape, target));
                report.initialized.push(name);
            }
        }
    }
    Ok((params, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::init_params;

    fn cfg() -> ModelConfig {
        ModelConfig {
            num_layers: 1,
            num_heads: 2,
            hidden_dim: 8,
            ff_dim: 16,
            vocab_size: 30,
            max_position: 16,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let p: ParameterSet<f32> = init_params(&cfg()).unwrap();
        save_checkpoint(&path, &p, &cfg()).unwrap();
        let (q, c) = load_checkpoint(&path).unwrap();
        assert!(p.bitwise_eq(&q));
        assert_eq!(c, cfg());
    }

    #[test]
    fn bundle_keeps_aux_and_meta() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        let p: ParameterSet<f32> = init_params(&cfg()).unwrap();
        let mut aux = BTreeMap::new();
        aux.insert("adam_m".to_string(), p.zeros_like());
        let mut meta = BTreeMap::new();
        meta.insert("step".to_string(), serde_json::json!(7));
        let b = CheckpointBundle {
            config: cfg(),
            params: p,
            aux,
            meta,
        };
        save_checkpoint_bundle(&path, &b).unwrap();
        assert_eq!(load_checkpoint_bundle(&path).unwrap(), b);
    }

    #[test]
    fn truncated_blob_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let p: ParameterSet<f32> = init_params(&cfg()).unwrap();
        save_checkpoint(&path, &p, &cfg()).unwrap();
        let blob = blob_path(&path);
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(EncoderError::CorruptCheckpoint(_))));

        fs::write(&path, b"{\"format_version\": 1, \"conf").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(EncoderError::CorruptCheckpoint(_))));
    }

    #[test]
    fn manifest_config_disagreeing_with_tensors_is_shape_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let p: ParameterSet<f32> = init_params(&cfg()).unwrap();
        save_checkpoint(&path, &p, &cfg()).unwrap();
        let mut m: serde_json::Value = serde_json::from_slice(&fs::read(&path).unwrap()).unwrap();
        m["config"]["hidden_dim"] = serde_json::json!(64);
        fs::write(&path, serde_json::to_vec(&m).unwrap()).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(EncoderError::ShapeMismatch { .. })));
    }

    #[test]
    fn import_copies_encoder_and_initializes_missing_heads() {
        let c = cfg();
        let mut p: ParameterSet<f32> = init_params(&c).unwrap();
        p.remove("classifier.weight");
        p.remove("classifier.bias");
        let target = ModelConfig { seed: 99, ..c.clone() };
        let (q, report) = import_initialization(&target, &p, &c).unwrap();
        assert_eq!(report.initialized, vec!["classifier.bias".to_string(), "classifier.weight".to_string()]);
        assert_eq!(report.copied.len(), p.len());
        assert_eq!(q.get("embeddings.word"), p.get("embeddings.word"));
        assert!(q.contains("classifier.weight"));

        let (_, full) = import_initialization(&c, &init_params(&c).unwrap(), &c).unwrap();
        assert!(full.initialized.is_empty());

        let deeper = ModelConfig { num_layers: 2, ..c.clone() };
        assert!(matches!(
            import_initialization(&deeper, &p, &c),
            Err(EncoderError::IncompatibleArchitecture(_))
        ));
    }
}
