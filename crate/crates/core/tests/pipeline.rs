use std::collections::BTreeSet;

use clinlm_core::cohort::{select_cohort, split_dataset, CohortConfig, Split};
use clinlm_core::encoder::{init_params, load_checkpoint_bundle, save_checkpoint_bundle, ModelConfig, ParameterSet};
use clinlm_core::finetune::{finetune_loop, predict_notes, DocMode, FinetuneConfig, LabeledNote, Strategy};
use clinlm_core::ingest::{
    clean_notes, generate_synthetic_corpus, group_creatinine, load_creatinine, load_notes, load_stays,
    split_sentence_texts, write_creatinine, write_notes, write_stays, SyntheticSpec,
};
use clinlm_core::optim::AdamConfig;
use clinlm_core::pretrain::{pretrain_loop, MaskingConfig, PretrainConfig, TrainState};
use clinlm_core::tokenizer::{build_test_vocab, Tokenizer};

fn corpus(n: usize, seed: u64) -> clinlm_core::ingest::SyntheticCorpus {
    generate_synthetic_corpus(&SyntheticSpec {
        n_stays: n,
        seed,
        ..SyntheticSpec::default()
    })
    .unwrap()
}

#[test]
fn tables_survive_a_disk_round_trip() {
    let c = corpus(40, 1);
    let dir = tempfile::tempdir().unwrap();
    let (s, k, n) = (dir.path().join("s.csv"), dir.path().join("c.csv"), dir.path().join("n.csv"));
    write_stays(&s, &c.stays).unwrap();
    write_creatinine(&k, &c.creatinine).unwrap();
    write_notes(&n, &c.notes).unwrap();

    assert_eq!(load_stays(&s).unwrap(), c.stays);
    assert_eq!(load_notes(&n).unwrap(), c.notes);
    let grouped = load_creatinine(&k).unwrap();
    let expected = group_creatinine(&c.creatinine);
    assert_eq!(grouped.len(), expected.len());
    for (id, series) in &expected {
        assert_eq!(grouped[id].points(), series.points(), "{id}");
    }
}

#[test]
fn cohort_labels_follow_planted_courses_and_splits_partition_stays() {
    let c = corpus(300, 2);
    let notes = clean_notes(c.notes, false).notes;
    let cohort = select_cohort(&c.stays, &group_creatinine(&c.creatinine), &notes, &CohortConfig::default()).unwrap();
    assert!(cohort.stays.len() > 200);
    for s in &cohort.stays {
        assert_eq!(s.label.is_aki, c.labels[&s.stay.stay_id], "{}", s.stay.stay_id);
    }
    let splits = split_dataset(&cohort, [0.56, 0.14, 0.30], 0.03, 2).unwrap();
    let ids: BTreeSet<&String> = cohort.stays.iter().map(|s| &s.stay.stay_id).collect();
    assert_eq!(splits.keys().collect::<BTreeSet<_>>(), ids);
    for split in Split::ALL {
        assert!(splits.values().any(|s| *s == split), "{split:?} empty");
    }
    assert_eq!(splits, split_dataset(&cohort, [0.56, 0.14, 0.30], 0.03, 2).unwrap());
}

fn small_model(vocab: usize) -> ModelConfig {
    ModelConfig {
        hidden_dim: 16,
        ff_dim: 32,
        vocab_size: vocab,
        max_position: 32,
        seed: 5,
        ..ModelConfig::default()
    }
}

#[test]
fn interrupted_pretraining_resumes_bitwise() {
    let c = corpus(30, 3);
    let notes: Vec<Vec<String>> = c.notes.iter().map(|n| split_sentence_texts(&n.text)).collect();
    let tok = Tokenizer::new(build_test_vocab(c.notes.iter().map(|n| n.text.as_str()), 200, true).unwrap());
    let model = small_model(tok.vocab.len());
    let cfg = |steps| PretrainConfig {
        max_seq_len: 32,
        batch_size: 4,
        epochs: 50,
        max_steps: Some(steps),
        learning_rate: 1e-3,
        checkpoint_every: 0,
        seed: 9,
        ..PretrainConfig::default()
    };
    let masking = MaskingConfig::default();
    let fresh = || TrainState::new(init_params(&model).unwrap(), &model, AdamConfig::default());

    let (full, _) = pretrain_loop(&notes, &tok, &model, fresh(), &cfg(8), &masking, None).unwrap();

    let (half, _) = pretrain_loop(&notes, &tok, &model, fresh(), &cfg(4), &masking, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    save_checkpoint_bundle(&path, &half.to_bundle(&model)).unwrap();
    let restored = TrainState::from_bundle(load_checkpoint_bundle(&path).unwrap(), AdamConfig::default()).unwrap();
    assert_eq!(restored.step, 4);
    let (resumed, rows) = pretrain_loop(&notes, &tok, &model, restored, &cfg(8), &masking, None).unwrap();

    assert_eq!(rows.len(), 4);
    assert!(resumed.params.bitwise_eq(&full.params));
    assert_eq!(resumed, full);
}

#[test]
fn finetuning_is_deterministic_and_probabilities_are_valid() {
    let c = corpus(120, 4);
    let notes = clean_notes(c.notes, false).notes;
    let labeled: Vec<LabeledNote> = notes
        .iter()
        .map(|n| LabeledNote {
            note: n.clone(),
            label: c.labels[&n.stay_id],
        })
        .collect();
    let (train, val) = labeled.split_at(90);
    let tok = Tokenizer::new(build_test_vocab(notes.iter().map(|n| n.text.as_str()), 300, true).unwrap());
    let model = small_model(tok.vocab.len());
    let cfg = FinetuneConfig {
        strategy: Strategy::Weight,
        doc_mode: DocMode::Truncating,
        epochs: 1,
        eval_every_batches: 10,
        max_seq_len: Some(32),
        learning_rate: 1e-3,
        ..FinetuneConfig::default()
    };
    let init: ParameterSet<f32> = init_params(&model).unwrap();
    let a = finetune_loop(&init, &model, &tok, train, val, &cfg).unwrap();
    let b = finetune_loop(&init, &model, &tok, train, val, &cfg).unwrap();
    assert!(a.params.bitwise_eq(&b.params));
    assert_eq!(a.best_step, b.best_step);

    let docs: Vec<_> = val.iter().map(|l| l.note.clone()).collect();
    let probs = predict_notes(&a.params, &model, &tok, &cfg, &docs).unwrap();
    assert_eq!(probs.len(), docs.len());
    assert!(probs.iter().all(|p| (0.0..=1.0).contains(p)));
}
