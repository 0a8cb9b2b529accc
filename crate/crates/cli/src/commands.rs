//! One function per subcommand. Every artifact lands under the configured
//! output directory and its path is printed on stdout.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::info;

use clinlm_core::attnviz::{attention_salience, render_html, write_salience_csv, AttentionSelection, NoteMetadata};
use clinlm_core::cohort::{
    corpus_stats as count_corpus, distinguish_corpora, read_cohort_csv, select_cohort, split_dataset, split_summary,
    word_correlations, write_cohort_csv, write_exclusion_report, write_word_correlations, CohortRow, Split,
};
use clinlm_core::encoder::{
    import_initialization, init_params, load_checkpoint, load_checkpoint_bundle, save_checkpoint,
    save_checkpoint_bundle, ModelConfig, ParameterSet,
};
use clinlm_core::evaluate::{metric_report, render_report};
use clinlm_core::finetune::{
    encoder_unchanged, finetune_loop, predict, predict_notes, prediction_rows, write_predictions, write_training_log,
    FinetuneConfig, LabeledNote,
};
use clinlm_core::ingest::{
    clean_notes, generate_synthetic_corpus, load_creatinine, load_notes, load_stays, split_sentence_texts,
    write_creatinine, write_notes, write_stays, NoteDocument,
};
use clinlm_core::pretrain::{pretrain_loop, write_loss_csv, TrainState};
use clinlm_core::tokenizer::{build_test_vocab, load_vocab, Tokenizer};

use crate::config::PipelineConfig;
use crate::{exit_err, Dummy};

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn require_input(path: &Path) -> Result<()> {
    if !path.is_file() {
        return Err(exit_err(2, format!("missing input file: {}", path.display())));
    }
    Ok(())
}

fn require_checkpoint(path: &Path) -> Result<()> {
    if !path.is_file() {
        return Err(exit_err(6, format!("missing checkpoint: {}", path.display())));
    }
    Ok(())
}

fn emit(path: &Path) {
    println!("{}", path.display());
}

fn tokenizer(cfg: &PipelineConfig) -> Result<Tokenizer> {
    let path = cfg.vocab_path();
    require_input(&path)?;
    let mut tok = Tokenizer::new(load_vocab(&path)?);
    tok.lowercase = !cfg.tokenizer.cased;
    Ok(tok)
}

/// The configured architecture sized to the vocabulary in use.
fn model_config(cfg: &PipelineConfig, tok: &Tokenizer) -> ModelConfig {
    ModelConfig {
        vocab_size: tok.vocab.len(),
        ..cfg.model.clone()
    }
}

/// Name of a fine-tuning setting, e.g. `sbs-pooling`.
fn setting(ft: &FinetuneConfig) -> String {
    format!("{}-{}", ft.strategy.as_str(), ft.doc_mode.as_str())
}

fn finetuned_model_path(cfg: &PipelineConfig) -> PathBuf {
    cfg.output_dir.join("finetune").join(setting(&cfg.finetune)).join("model.json")
}

/// Cohort stays and their prediction notes as written by `cohort`.
struct CohortData {
    rows: BTreeMap<String, CohortRow>,
    notes: Vec<NoteDocument>,
}

impl CohortData {
    fn load(cfg: &PipelineConfig) -> Result<Self> {
        let dir = cfg.cohort_dir();
        let (cohort_csv, notes_csv) = (dir.join("cohort.csv"), dir.join("notes.csv"));
        require_input(&cohort_csv)?;
        require_input(&notes_csv)?;
        let rows = read_cohort_csv(&cohort_csv)?
            .into_iter()
            .map(|r| (r.stay_id.clone(), r))
            .collect();
        Ok(Self {
            rows,
            notes: load_notes(&notes_csv)?,
        })
    }

    fn label(&self, note: &NoteDocument) -> Option<bool> {
        self.rows.get(&note.stay_id).map(|r| r.is_aki)
    }

    fn split(&self, split: Split) -> Vec<LabeledNote> {
        self.notes
            .iter()
            .filter_map(|n| {
                let row = self.rows.get(&n.stay_id)?;
                (row.split == Some(split)).then(|| LabeledNote {
                    note: n.clone(),
                    label: row.is_aki,
                })
            })
            .collect()
    }
}

pub fn synth(cfg: &PipelineConfig) -> Result<()> {
    let corpus = generate_synthetic_corpus(&cfg.synth.spec(cfg.stage_seed("synth")))?;
    let dir = cfg.tables_dir();
    ensure_dir(&dir)?;
    let (stays, creat, notes) = (dir.join("stays.csv"), dir.join("creatinine.csv"), dir.join("notes.csv"));
    write_stays(&stays, &corpus.stays)?;
    write_creatinine(&creat, &corpus.creatinine)?;
    write_notes(&notes, &corpus.notes)?;
    let positives = corpus.labels.values().filter(|&&l| l).count();
    info!(
        "synthetic corpus: {} stays ({} planted AKI), {} notes",
        corpus.stays.len(),
        positives,
        corpus.notes.len()
    );
    for p in [&stays, &creat, &notes] {
        emit(p);
    }
    Ok(())
}

pub fn cohort(cfg: &PipelineConfig) -> Result<()> {
    let (stays_p, creat_p, notes_p) = (cfg.stays_path(), cfg.creatinine_path(), cfg.notes_path());
    for p in [&stays_p, &creat_p, &notes_p] {
        require_input(p)?;
    }
    let stays = load_stays(&stays_p)?;
    let creatinine = load_creatinine(&creat_p)?;
    let cleaned = clean_notes(load_notes(&notes_p)?, cfg.tokenizer.cased);
    if cleaned.dropped > 0 {
        info!("dropped {} notes with empty text after cleaning", cleaned.dropped);
    }
    let cohort = select_cohort(&stays, &creatinine, &cleaned.notes, &cfg.cohort)?;
    if cohort.stays.is_empty() {
        return Err(exit_err(3, "empty cohort: no stay satisfies the inclusion criteria"));
    }
    let splits = split_dataset(
        &cohort,
        cfg.split.fractions,
        cfg.split.max_prevalence_gap,
        cfg.stage_seed("split"),
    )?;

    let dir = cfg.cohort_dir();
    ensure_dir(&dir)?;
    let cohort_csv = dir.join("cohort.csv");
    let excl_csv = dir.join("exclusions.csv");
    let notes_csv = dir.join("notes.csv");
    let summary_csv = dir.join("summary.csv");
    write_cohort_csv(&cohort_csv, &cohort, &splits)?;
    write_exclusion_report(&excl_csv, &cohort.report)?;
    let notes: Vec<NoteDocument> = cohort.notes().cloned().collect();
    write_notes(&notes_csv, &notes)?;

    let summary = split_summary(&cohort, &splits);
    let mut w = csv::Writer::from_path(&summary_csv)?;
    w.write_record(["split", "stays", "notes", "aki_notes", "non_aki_notes", "prevalence"])?;
    println!("{:<12} {:>7} {:>7} {:>9} {:>13} {:>11}", "split", "stays", "notes", "AKI", "non-AKI", "prevalence");
    for r in &summary {
        println!(
            "{:<12} {:>7} {:>7} {:>9} {:>13} {:>11}",
            r.split,
            r.stays,
            r.notes,
            r.aki_notes,
            r.non_aki_notes,
            r.prevalence_pct()
        );
        w.write_record([
            r.split.clone(),
            r.stays.to_string(),
            r.notes.to_string(),
            r.aki_notes.to_string(),
            r.non_aki_notes.to_string(),
            r.prevalence_pct(),
        ])?;
    }
    w.flush()?;
    info!("{} stays kept, {} excluded", cohort.stays.len(), cohort.report.len());

    let mut outputs = vec![cohort_csv, excl_csv, notes_csv, summary_csv];
    if cfg.paths.vocab.is_none() {
        let train_texts: Vec<&str> = cohort
            .stays
            .iter()
            .filter(|s| splits.get(&s.stay.stay_id) == Some(&Split::Train))
            .flat_map(|s| s.notes.iter().map(|n| n.text.as_str()))
            .collect();
        let vocab = build_test_vocab(train_texts, cfg.tokenizer.vocab_size, !cfg.tokenizer.cased)?;
        let path = cfg.vocab_path();
        vocab.save(&path)?;
        info!("vocabulary of {} wordpieces built from training notes", vocab.len());
        outputs.push(path);
    }
    for p in &outputs {
        emit(p);
    }
    Ok(())
}

pub fn corpus_stats(cfg: &PipelineConfig) -> Result<()> {
    let data = CohortData::load(cfg)?;
    let tok = tokenizer(cfg)?;
    let dir = cfg.output_dir.join("analysis");
    ensure_dir(&dir)?;
    let path = dir.join("corpus_stats.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["split", "notes", "sentences", "tokens"])?;
    let mut groups: Vec<(&str, Vec<NoteDocument>)> = Split::ALL
        .iter()
        .map(|&s| (s.as_str(), data.split(s).into_iter().map(|l| l.note).collect()))
        .collect();
    groups.push(("total", data.notes.clone()));
    for (name, notes) in &groups {
        let s = count_corpus(notes, &tok);
        println!("{name:<12} notes {:>8} sentences {:>10} tokens {:>12}", s.note_count, s.sentence_count, s.token_count);
        w.write_record([
            name.to_string(),
            s.note_count.to_string(),
            s.sentence_count.to_string(),
            s.token_count.to_string(),
        ])?;
    }
    w.flush()?;
    emit(&path);
    Ok(())
}

/// Texts of the two corpora: given notes files, or the cohort's AKI and
/// non-AKI notes.
fn two_corpora(cfg: &PipelineConfig, a: Option<&Path>, b: Option<&Path>) -> Result<(Vec<String>, Vec<String>)> {
    let read = |p: &Path| -> Result<Vec<String>> {
        require_input(p)?;
        let notes = clean_notes(load_notes(p)?, cfg.tokenizer.cased).notes;
        Ok(notes.into_iter().map(|n| n.text).collect())
    };
    match (a, b) {
        (Some(a), Some(b)) => Ok((read(a)?, read(b)?)),
        (None, None) => {
            let data = CohortData::load(cfg)?;
            let (mut pos, mut neg) = (Vec::new(), Vec::new());
            for n in &data.notes {
                match data.label(n) {
                    Some(true) => pos.push(n.text.clone()),
                    Some(false) => neg.push(n.text.clone()),
                    None => {}
                }
            }
            Ok((pos, neg))
        }
        _ => bail!("give both --corpus-a and --corpus-b, or neither"),
    }
}

pub fn distinguish(cfg: &PipelineConfig, a: Option<&Path>, b: Option<&Path>) -> Result<()> {
    let (ca, cb) = two_corpora(cfg, a, b)?;
    let ra: Vec<&str> = ca.iter().map(String::as_str).collect();
    let rb: Vec<&str> = cb.iter().map(String::as_str).collect();
    let accuracy = distinguish_corpora(&ra, &rb, &cfg.distinguish)?;
    let dir = cfg.output_dir.join("analysis");
    ensure_dir(&dir)?;
    let path = dir.join("distinguish.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["corpus_a_notes", "corpus_b_notes", "folds", "accuracy"])?;
    w.write_record([
        ra.len().to_string(),
        rb.len().to_string(),
        cfg.distinguish.folds.to_string(),
        format!("{accuracy:.6}"),
    ])?;
    w.flush()?;
    info!("cross-validated accuracy {accuracy:.4} ({} vs {} notes)", ra.len(), rb.len());
    emit(&path);
    Ok(())
}

pub fn word_corr(cfg: &PipelineConfig, a: Option<&Path>, b: Option<&Path>) -> Result<()> {
    let (ca, cb) = two_corpora(cfg, a, b)?;
    let ra: Vec<&str> = ca.iter().map(String::as_str).collect();
    let rb: Vec<&str> = cb.iter().map(String::as_str).collect();
    let rows = word_correlations(&ra, &rb)?;
    let dir = cfg.output_dir.join("analysis");
    ensure_dir(&dir)?;
    let path = dir.join("word_correlations.csv");
    write_word_correlations(&path, &rows)?;
    for r in rows.iter().take(10) {
        info!("{:<20} r={:+.4} support={}", r.word, r.pearson_r, r.support);
    }
    emit(&path);
    Ok(())
}

/// Initial parameters: the configured checkpoint (copying every tensor that
/// matches the target architecture) or a fresh draw.
fn initial_params(cfg: &PipelineConfig, model: &ModelConfig) -> Result<ParameterSet<f32>> {
    match &cfg.paths.init_checkpoint {
        Some(path) => {
            require_checkpoint(path)?;
            let (params, source) = load_checkpoint(path)?;
            let (params, report) = import_initialization(model, &params, &source)?;
            info!(
                "initialized from {}: {} tensors copied, {} fresh",
                path.display(),
                report.copied.len(),
                report.initialized.len()
            );
            Ok(params)
        }
        None => Ok(init_params(model)?),
    }
}

pub fn pretrain(cfg: &PipelineConfig, resume: Option<&Path>) -> Result<()> {
    let data = CohortData::load(cfg)?;
    let tok = tokenizer(cfg)?;
    let model = model_config(cfg, &tok);
    let notes: Vec<Vec<String>> = data
        .split(Split::Train)
        .iter()
        .map(|l| split_sentence_texts(&l.note.text))
        .collect();
    let state = match resume {
        Some(path) => {
            require_checkpoint(path)?;
            let bundle = load_checkpoint_bundle(path)?;
            if !bundle.config.same_architecture(&model) {
                bail!("checkpoint {} does not match the configured model", path.display());
            }
            TrainState::from_bundle(bundle, cfg.pretrain.adam.clone())?
        }
        None => TrainState::new(initial_params(cfg, &model)?, &model, cfg.pretrain.adam.clone()),
    };
    let dir = cfg.output_dir.join("pretrain");
    let steps_dir = dir.join("steps");
    ensure_dir(&steps_dir)?;
    info!("pre-training on {} notes from step {}", notes.len(), state.step);
    let (state, rows) = pretrain_loop(&notes, &tok, &model, state, &cfg.pretrain, &cfg.masking, Some(&steps_dir))?;
    if let (Some(first), Some(last)) = (rows.first(), rows.last()) {
        info!("loss {:.4} at step {} -> {:.4} at step {}", first.total, first.step, last.total, last.step);
    }
    let ckpt = dir.join("model.json");
    let loss = dir.join("loss.csv");
    save_checkpoint_bundle(&ckpt, &state.to_bundle(&model))?;
    write_loss_csv(&loss, &rows)?;
    emit(&ckpt);
    emit(&loss);
    Ok(())
}

pub fn finetune(cfg: &PipelineConfig) -> Result<()> {
    let data = CohortData::load(cfg)?;
    let tok = tokenizer(cfg)?;
    let model = model_config(cfg, &tok);
    let init = initial_params(cfg, &model)?;
    let (train, val) = (data.split(Split::Train), data.split(Split::Validation));
    info!(
        "fine-tuning {} on {} training and {} validation notes",
        setting(&cfg.finetune),
        train.len(),
        val.len()
    );
    let outcome = finetune_loop(&init, &model, &tok, &train, &val, &cfg.finetune)?;
    if outcome.encoder_frozen {
        info!(
            "encoder frozen: only the classifier head was trained (encoder unchanged: {})",
            encoder_unchanged(&outcome.params, &init)
        );
    }
    match (outcome.best_val_auc, outcome.best_step) {
        (Some(auc), Some(step)) => info!("best validation AUC {auc:.4} at step {step}"),
        _ => info!("no evaluation point; keeping the initial model"),
    }
    let dir = finetuned_model_path(cfg).parent().map(Path::to_path_buf).unwrap_or_default();
    ensure_dir(&dir)?;
    let ckpt = dir.join("model.json");
    let log_path = dir.join("train_log.csv");
    save_checkpoint(&ckpt, &outcome.params, &model)?;
    write_training_log(&log_path, &outcome.log)?;
    emit(&ckpt);
    emit(&log_path);
    Ok(())
}

pub fn evaluate(cfg: &PipelineConfig, dummy: Option<Dummy>) -> Result<()> {
    let data = CohortData::load(cfg)?;
    let test = data.split(Split::Test);
    if test.is_empty() {
        bail!("the test split has no notes");
    }
    let labels: Vec<bool> = test.iter().map(|l| l.label).collect();
    let notes: Vec<NoteDocument> = test.into_iter().map(|l| l.note).collect();
    let (name, probabilities) = match dummy {
        Some(Dummy::AllPositive) => ("dummy-all-positive".to_string(), vec![1.0; notes.len()]),
        Some(Dummy::AllNegative) => ("dummy-all-negative".to_string(), vec![0.0; notes.len()]),
        None => {
            let path = finetuned_model_path(cfg);
            require_checkpoint(&path)?;
            let (params, model) = load_checkpoint(&path)?;
            let tok = tokenizer(cfg)?;
            (setting(&cfg.finetune), predict_notes(&params, &model, &tok, &cfg.finetune, &notes)?)
        }
    };
    let threshold = cfg.finetune.decision_threshold;
    let report = metric_report(
        &cfg.evaluate.model_name,
        &name,
        &labels,
        &probabilities,
        threshold,
        &cfg.evaluate.bootstrap,
    )?;
    let rendered = render_report(&[report])?;
    let dir = cfg.output_dir.join("evaluate").join(&name);
    ensure_dir(&dir)?;
    let preds = dir.join("predictions.csv");
    write_predictions(&preds, &prediction_rows(&notes, &probabilities, threshold))?;
    let mut outputs = vec![preds];
    for (file, body) in [
        ("report.txt", &rendered.text),
        ("report.csv", &rendered.csv),
        ("report.json", &rendered.json),
    ] {
        let p = dir.join(file);
        fs::write(&p, body).with_context(|| format!("writing {}", p.display()))?;
        outputs.push(p);
    }
    eprint!("{}", rendered.text);
    for p in &outputs {
        emit(p);
    }
    Ok(())
}

fn file_stem(note_id: &str) -> String {
    note_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

pub fn visualize(cfg: &PipelineConfig, note_id: &str) -> Result<()> {
    let data = CohortData::load(cfg)?;
    let Some(note) = data.notes.iter().find(|n| n.note_id == note_id) else {
        bail!("note `{note_id}` not found in the cohort");
    };
    let path = finetuned_model_path(cfg);
    require_checkpoint(&path)?;
    let (params, model) = load_checkpoint(&path)?;
    let tok = tokenizer(cfg)?;
    let selection = AttentionSelection {
        layer: cfg.visualize.layer,
    };
    let salience = attention_salience(&params, &model, &tok, &cfg.finetune, note, selection)?;
    let meta = NoteMetadata {
        note_id: note.note_id.clone(),
        probability: predict(&params, &model, &tok, &cfg.finetune, note)?,
        label: data.label(note),
    };
    let dir = cfg.output_dir.join("visualize").join(setting(&cfg.finetune));
    ensure_dir(&dir)?;
    let stem = file_stem(note_id);
    let html = dir.join(format!("{stem}.html"));
    let csv_path = dir.join(format!("{stem}.csv"));
    render_html(&salience, &meta, &html)?;
    write_salience_csv(&csv_path, &salience)?;
    emit(&html);
    emit(&csv_path);
    Ok(())
}
