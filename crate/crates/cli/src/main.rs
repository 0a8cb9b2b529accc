//! `clinlm`: cohort extraction, pre-training, fine-tuning, evaluation and
//! attention visualization for early AKI prediction from ICU notes.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use clinlm_core::cohort::CohortError;
use clinlm_core::evaluate::EvaluateError;
use clinlm_core::finetune::{DocMode, FinetuneError, Strategy};
use clinlm_core::ingest::IngestError;
use clinlm_core::pretrain::PretrainError;
use clinlm_core::tokenizer::TokenizerError;

use crate::config::PipelineConfig;

#[derive(Parser, Debug)]
#[command(name = "clinlm", version, about = "Clinical language-model pipeline for early AKI prediction")]
struct Cli {
    #[command(flatten)]
    common: CommonArgs,
    #[command(subcommand)]
    command: Command,
}

/// Flags accepted by every subcommand.
#[derive(Args, Debug, Clone)]
struct CommonArgs {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed; every stage seed is derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory all artifacts are written under.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Override any configuration key, e.g. `--set finetune.learning_rate=1e-3`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Fine-tuning setting (overrides `finetune.strategy`).
    #[arg(long, value_enum, global = true)]
    strategy: Option<StrategyArg>,
    /// Long-note strategy (overrides `finetune.doc_mode`).
    #[arg(long, value_enum, global = true)]
    doc_mode: Option<DocModeArg>,
    /// Checkpoint to start from (overrides `paths.init_checkpoint`).
    #[arg(long, global = true)]
    init: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a seeded synthetic set of input tables.
    Synth,
    /// Label stays, apply exclusions, split, and build the vocabulary.
    Cohort,
    /// Note, sentence and wordpiece counts per split.
    CorpusStats,
    /// Cross-validated accuracy of a bag-of-words corpus classifier.
    Distinguish {
        /// Notes CSV of the first corpus (default: AKI-labeled cohort notes).
        #[arg(long)]
        corpus_a: Option<PathBuf>,
        /// Notes CSV of the second corpus (default: non-AKI cohort notes).
        #[arg(long)]
        corpus_b: Option<PathBuf>,
    },
    /// Pearson correlation of word presence with corpus membership.
    WordCorr {
        #[arg(long)]
        corpus_a: Option<PathBuf>,
        #[arg(long)]
        corpus_b: Option<PathBuf>,
    },
    /// MLM + NSP pre-training on the training-split notes.
    Pretrain {
        /// Continue an interrupted run from a pre-training checkpoint,
        /// restoring optimizer state and step.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Fine-tune the AKI classifier.
    Finetune,
    /// Metrics with bootstrap intervals on the test split.
    Evaluate {
        /// Replace the model with a constant predictor.
        #[arg(long, value_enum)]
        dummy: Option<Dummy>,
    },
    /// Attention highlight of one note as HTML.
    Visualize {
        #[arg(long)]
        note_id: String,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum StrategyArg {
    Sbs,
    Ds,
    Us,
    Weight,
    Static,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Sbs => Strategy::Sbs,
            StrategyArg::Ds => Strategy::Ds,
            StrategyArg::Us => Strategy::Us,
            StrategyArg::Weight => Strategy::Weight,
            StrategyArg::Static => Strategy::Static,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum DocModeArg {
    Truncating,
    Pooling,
}

impl From<DocModeArg> for DocMode {
    fn from(d: DocModeArg) -> Self {
        match d {
            DocModeArg::Truncating => DocMode::Truncating,
            DocModeArg::Pooling => DocMode::Pooling,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dummy {
    AllPositive,
    AllNegative,
}

/// A failure that carries its own exit code.
#[derive(Debug)]
pub struct Exit {
    pub code: u8,
    pub message: String,
}

impl std::fmt::Display for Exit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Exit {}

pub fn exit_err(code: u8, message: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(Exit {
        code,
        message: message.into(),
    })
}

/// 2 configuration/schema/input, 3 empty cohort, 4 non-finite loss, 5 single-class split,
/// 6 missing checkpoint, 1 anything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Exit>() {
            return e.code;
        }
        if cause.is::<IngestError>() || cause.is::<TokenizerError>() {
            return 2;
        }
        if let Some(PretrainError::NonFiniteLoss { .. }) = cause.downcast_ref::<PretrainError>() {
            return 4;
        }
        match cause.downcast_ref::<FinetuneError>() {
            Some(FinetuneError::NonFiniteLoss { .. }) => return 4,
            Some(FinetuneError::SingleClassData) => return 5,
            _ => {}
        }
        if let Some(EvaluateError::SingleClassData) = cause.downcast_ref::<EvaluateError>() {
            return 5;
        }
        if let Some(CohortError::EmptyCorpus) = cause.downcast_ref::<CohortError>() {
            return 3;
        }
    }
    1
}

fn build_config(common: &CommonArgs) -> anyhow::Result<PipelineConfig> {
    let mut overrides = Vec::new();
    if let Some(s) = common.seed {
        overrides.push(format!("seed={s}"));
    }
    if let Some(d) = &common.output_dir {
        overrides.push(format!("output_dir={}", toml::Value::String(d.display().to_string())));
    }
    overrides.extend(common.overrides.iter().cloned());
    let mut cfg = PipelineConfig::load(common.config.as_deref(), &overrides).map_err(|e| exit_err(2, format!("{e:#}")))?;
    if let Some(s) = common.strategy {
        cfg.finetune.strategy = s.into();
    }
    if let Some(d) = common.doc_mode {
        cfg.finetune.doc_mode = d.into();
    }
    if let Some(p) = &common.init {
        cfg.paths.init_checkpoint = Some(p.clone());
    }
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = build_config(&cli.common)?;
    match cli.command {
        Command::Synth => commands::synth(&cfg),
        Command::Cohort => commands::cohort(&cfg),
        Command::CorpusStats => commands::corpus_stats(&cfg),
        Command::Distinguish { corpus_a, corpus_b } => {
            commands::distinguish(&cfg, corpus_a.as_deref(), corpus_b.as_deref())
        }
        Command::WordCorr { corpus_a, corpus_b } => commands::word_corr(&cfg, corpus_a.as_deref(), corpus_b.as_deref()),
        Command::Pretrain { resume } => commands::pretrain(&cfg, resume.as_deref()),
        Command::Finetune => commands::finetune(&cfg),
        Command::Evaluate { dummy } => commands::evaluate(&cfg, dummy),
        Command::Visualize { note_id } => commands::visualize(&cfg, &note_id),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
