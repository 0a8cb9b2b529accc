//! Pipeline configuration: one TOML file, dotted `--set` overrides, and a
//! global seed that is fanned out to every stage.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

use clinlm_core::cohort::{CohortConfig, DistinguishConfig};
use clinlm_core::encoder::ModelConfig;
use clinlm_core::evaluate::BootstrapConfig;
use clinlm_core::finetune::FinetuneConfig;
use clinlm_core::ingest::SyntheticSpec;
use clinlm_core::pretrain::{MaskingConfig, PretrainConfig};
use clinlm_core::seed::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Input tables; default to the `tables/` directory written by `synth`.
    pub stays: Option<PathBuf>,
    pub creatinine: Option<PathBuf>,
    pub notes: Option<PathBuf>,
    /// WordPiece vocabulary; built by `cohort` when unset.
    pub vocab: Option<PathBuf>,
    /// Checkpoint to start pre-training or fine-tuning from.
    pub init_checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub n_stays: usize,
    pub prevalence: f64,
    pub signal_tokens: Vec<String>,
    pub vocab_size: usize,
    pub signal_rate: f64,
    pub notes_per_stay: (usize, usize),
    pub sentences_per_note: (usize, usize),
    pub words_per_sentence: (usize, usize),
}

impl Default for SynthSection {
    fn default() -> Self {
        let s = SyntheticSpec::default();
        Self {
            n_stays: s.n_stays,
            prevalence: s.prevalence,
            signal_tokens: s.signal_tokens,
            vocab_size: s.vocab_size,
            signal_rate: s.signal_rate,
            notes_per_stay: s.notes_per_stay,
            sentences_per_note: s.sentences_per_note,
            words_per_sentence: s.words_per_sentence,
        }
    }
}

impl SynthSection {
    pub fn spec(&self, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            n_stays: self.n_stays,
            prevalence: self.prevalence,
            signal_tokens: self.signal_tokens.clone(),
            vocab_size: self.vocab_size,
            signal_rate: self.signal_rate,
            notes_per_stay: self.notes_per_stay,
            sentences_per_note: self.sentences_per_note,
            words_per_sentence: self.words_per_sentence,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub fractions: [f64; 3],
    pub max_prevalence_gap: f64,
}

impl Default for SplitSection {
    fn default() -> Self {
        Self {
            fractions: [0.56, 0.14, 0.30],
            max_prevalence_gap: 0.03,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerSection {
    /// Target size of a vocabulary built from the training notes.
    pub vocab_size: usize,
    pub cased: bool,
}

impl Default for TokenizerSection {
    fn default() -> Self {
        Self {
            vocab_size: 2000,
            cased: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    pub bootstrap: BootstrapConfig,
    /// Name used for the model column of the report.
    pub model_name: String,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        Self {
            bootstrap: BootstrapConfig::default(),
            model_name: "clinlm".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct VisualizeSection {
    /// Attention layer to read; the last layer when unset.
    pub layer: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub paths: Paths,
    pub synth: SynthSection,
    pub cohort: CohortConfig,
    pub split: SplitSection,
    pub tokenizer: TokenizerSection,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub masking: MaskingConfig,
    pub finetune: FinetuneConfig,
    pub evaluate: EvaluateSection,
    pub distinguish: DistinguishConfig,
    pub visualize: VisualizeSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            output_dir: PathBuf::from("runs"),
            paths: Paths::default(),
            synth: SynthSection::default(),
            cohort: CohortConfig::default(),
            split: SplitSection::default(),
            tokenizer: TokenizerSection::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            masking: MaskingConfig::default(),
            finetune: FinetuneConfig::default(),
            evaluate: EvaluateSection::default(),
            distinguish: DistinguishConfig::default(),
            visualize: VisualizeSection::default(),
        }
    }
}

/// Parses the right-hand side of `key=value` as a TOML value, falling back
/// to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let (last, parents) = parts.split_last().ok_or_else(|| anyhow!("empty override key"))?;
    let mut table = root;
    for p in parents {
        table = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| anyhow!("`{p}` in `{key}` is not a section"))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

/// Every key of `given` must survive a round trip through the typed
/// config; otherwise it was misspelled or misplaced.
fn check_known(given: &toml::Table, known: &toml::Table, prefix: &str) -> Result<()> {
    for (k, v) in given {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (v, known.get(k)) {
            (_, None) => bail!("unknown configuration key `{path}`"),
            (toml::Value::Table(g), Some(toml::Value::Table(kn))) => check_known(g, kn, &path)?,
            _ => {}
        }
    }
    Ok(())
}

impl PipelineConfig {
    /// Reads `path` (if given), applies `key=value` overrides, and returns
    /// the merged configuration. Unknown keys are rejected.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str::<toml::Table>(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            let Some((k, v)) = o.split_once('=') else {
                bail!("override `{o}` is not of the form key=value");
            };
            set_path(&mut table, k.trim(), parse_value(v.trim()))?;
        }
        let cfg: PipelineConfig = toml::Value::Table(table.clone())
            .try_into()
            .context("invalid configuration")?;
        let canonical = toml::Table::try_from(&cfg).context("serializing configuration")?;
        check_known(&table, &canonical, "")?;
        Ok(cfg.with_stage_seeds())
    }

    /// Every stage seed is derived from the global seed and the stage name,
    /// so stages are independently reproducible.
    pub fn with_stage_seeds(mut self) -> Self {
        let s = self.seed;
        self.model.seed = derive_seed(s, "model");
        self.pretrain.seed = derive_seed(s, "pretrain");
        self.masking.seed = derive_seed(s, "masking");
        self.finetune.seed = derive_seed(s, "finetune");
        self.evaluate.bootstrap.seed = derive_seed(s, "bootstrap");
        self.distinguish.seed = derive_seed(s, "distinguish");
        self
    }

    pub fn stage_seed(&self, stage: &str) -> u64 {
        derive_seed(self.seed, stage)
    }

    pub fn tables_dir(&self) -> PathBuf {
        self.output_dir.join("tables")
    }

    pub fn cohort_dir(&self) -> PathBuf {
        self.output_dir.join("cohort")
    }

    pub fn stays_path(&self) -> PathBuf {
        self.paths.stays.clone().unwrap_or_else(|| self.tables_dir().join("stays.csv"))
    }

    pub fn creatinine_path(&self) -> PathBuf {
        self.paths
            .creatinine
            .clone()
            .unwrap_or_else(|| self.tables_dir().join("creatinine.csv"))
    }

    pub fn notes_path(&self) -> PathBuf {
        self.paths.notes.clone().unwrap_or_else(|| self.tables_dir().join("notes.csv"))
    }

    pub fn vocab_path(&self) -> PathBuf {
        self.paths.vocab.clone().unwrap_or_else(|| self.cohort_dir().join("vocab.txt"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_reach_nested_fields() {
        let cfg = PipelineConfig::load(
            None,
            &[
                "finetune.learning_rate=0.001".into(),
                "model.hidden_dim=16".into(),
                "finetune.strategy=weight".into(),
                "output_dir=out".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.finetune.learning_rate, 0.001);
        assert_eq!(cfg.model.hidden_dim, 16);
        assert_eq!(cfg.finetune.strategy.as_str(), "weight");
        assert_eq!(cfg.output_dir, PathBuf::from("out"));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(PipelineConfig::load(None, &["finetune.nope=1".into()]).is_err());
        assert!(PipelineConfig::load(None, &["bogus".into()]).is_err());
    }

    #[test]
    fn stage_seeds_follow_global_seed() {
        let a = PipelineConfig::load(None, &["seed=1".into()]).unwrap();
        let b = PipelineConfig::load(None, &["seed=2".into()]).unwrap();
        assert_ne!(a.finetune.seed, b.finetune.seed);
        assert_ne!(a.finetune.seed, a.pretrain.seed);
        assert_eq!(a, PipelineConfig::load(None, &["seed=1".into()]).unwrap());
    }
}
