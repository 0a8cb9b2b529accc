use super::*;
use crate::encoder::init_params;
use crate::ingest::{generate_synthetic_corpus, SyntheticSpec};
use crate::tokenizer::build_test_vocab;

fn note(id: &str, text: &str) -> NoteDocument {
    NoteDocument {
        note_id: id.into(),
        stay_id: format!("s-{id}"),
        chart_time_h: 1.0,
        category: "Nursing".into(),
        text: text.into(),
    }
}

fn setup(signal_rate: f64, n: usize) -> (Vec<LabeledNote>, Tokenizer, ModelConfig) {
    let corpus = generate_synthetic_corpus(&SyntheticSpec {
        n_stays: n,
        prevalence: 0.3,
        vocab_size: 40,
        signal_rate,
        sentences_per_note: (2, 4),
        words_per_sentence: (4, 8),
        seed: 5,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let tok = Tokenizer::new(build_test_vocab(corpus.notes.iter().map(|n| n.text.as_str()), 80, true).unwrap());
    let model = ModelConfig {
        num_layers: 1,
        num_heads: 2,
        hidden_dim: 16,
        ff_dim: 32,
        vocab_size: tok.vocab.len(),
        max_position: 64,
        seed: 2,
        ..ModelConfig::default()
    };
    let notes = corpus
        .notes
        .iter()
        .map(|n| LabeledNote {
            note: n.clone(),
            label: corpus.labels[&n.stay_id],
        })
        .collect();
    (notes, tok, model)
}

#[test]
fn pooling_is_max_over_sentences_and_order_free() {
    let (_, tok, model) = setup(0.2, 20);
    let params: ParameterSet<f32> = init_params(&model).unwrap();
    let cfg = FinetuneConfig::default();
    let text = "tagu bemi oliguria. pa ko. lu ti ma ne.";
    let e = embed_note_pooling(&params, &model, &tok, &note("a", text), &cfg).unwrap();
    let singles: Vec<Vec<f32>> = ["tagu bemi oliguria.", "pa ko.", "lu ti ma ne."]
        .iter()
        .map(|s| embed_note_pooling(&params, &model, &tok, &note("b", s), &cfg).unwrap().vector)
        .collect();
    let prov = e.contributing_sentence_per_dim.as_ref().unwrap();
    for d in 0..model.hidden_dim {
        let m = singles.iter().map(|v| v[d]).fold(f32::NEG_INFINITY, f32::max);
        assert_eq!(e.vector[d], m);
        assert_eq!(singles[prov[d]][d], m);
    }
    let shuffled = "pa ko. lu ti ma ne. tagu bemi oliguria. pa ko.";
    let f = embed_note_pooling(&params, &model, &tok, &note("c", shuffled), &cfg).unwrap();
    assert_eq!(e.vector, f.vector);
    let single = embed_note_pooling(&params, &model, &tok, &note("d", "pa ko."), &cfg).unwrap();
    assert_eq!(single.vector, singles[1]);
}

#[test]
fn truncation_only_sees_the_prefix() {
    let (_, tok, model) = setup(0.2, 20);
    let params: ParameterSet<f32> = init_params(&model).unwrap();
    let cfg = FinetuneConfig {
        doc_mode: DocMode::Truncating,
        max_seq_len: Some(8),
        ..FinetuneConfig::default()
    };
    let a = embed_note_truncating(&params, &model, &tok, &note("a", "pa ko lu ti ma ne bemi"), &cfg).unwrap();
    let b = embed_note_truncating(&params, &model, &tok, &note("b", "pa ko lu ti ma ne oliguria"), &cfg).unwrap();
    assert_eq!(a.vector, b.vector);
    let long = FinetuneConfig { max_seq_len: Some(64), ..cfg.clone() };
    let short = embed_note_truncating(&params, &model, &tok, &note("c", "pa ko"), &cfg).unwrap();
    let same = embed_note_truncating(&params, &model, &tok, &note("c", "pa ko"), &long).unwrap();
    assert_eq!(short.vector, same.vector);
    let empty = embed_note_truncating(&params, &model, &tok, &note("e", ""), &cfg).unwrap();
    assert!(empty.vector.iter().all(|v| v.is_finite()));
}

#[test]
fn sentence_sampling_keeps_order() {
    let idx = sample_sentences(300, 180, 4, "n1");
    assert_eq!(idx.len(), 180);
    assert!(idx.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(idx, sample_sentences(300, 180, 4, "n1"));
    assert_eq!(sample_sentences(5, 180, 4, "n1"), vec![0, 1, 2, 3, 4]);
}

#[test]
fn static_head_oracles() {
    // separable in one dimension
    let x: Vec<Vec<f32>> = (0..40).map(|i| vec![if i % 2 == 0 { 0.8 } else { -0.6 }, 0.1]).collect();
    let y: Vec<bool> = (0..40).map(|i| i % 2 == 0).collect();
    let (w, b) = static_train(&x, &y, &[0.0; 4], &[0.0; 2], 2000, 1.0).unwrap();
    let correct = x
        .iter()
        .zip(&y)
        .filter(|(xi, &yi)| {
            let z1 = b[1] + xi[0] * w[1] + xi[1] * w[3];
            let z0 = b[0] + xi[0] * w[0] + xi[1] * w[2];
            (z1 > z0) == yi
        })
        .count();
    assert_eq!(correct, 40);
    // positive correlation with the label gives a positive class-1 margin weight
    assert!(w[1] - w[0] > 0.0);

    // zero features: the bias converges to the prevalence log-odds
    let zeros = vec![vec![0.0f32; 3]; 50];
    let y: Vec<bool> = (0..50).map(|i| i < 10).collect();
    let (_, b) = static_train(&zeros, &y, &[0.0; 6], &[0.0; 2], 3000, 1.0).unwrap();
    let p = 1.0 / (1.0 + ((b[0] - b[1]) as f64).exp());
    assert!((p - 0.2).abs() < 1e-3, "{p}");
    assert!(matches!(static_train(&zeros, &[true; 50], &[0.0; 6], &[0.0; 2], 5, 1.0), Err(FinetuneError::SingleClassData)));
}

#[test]
fn zero_epochs_and_static_freeze() {
    let (notes, tok, model) = setup(0.3, 40);
    let params: ParameterSet<f32> = init_params(&model).unwrap();
    let (train, val) = notes.split_at(28);
    let cfg = FinetuneConfig {
        epochs: 0,
        ..FinetuneConfig::default()
    };
    let out = finetune_loop(&params, &model, &tok, train, val, &cfg).unwrap();
    assert!(out.log.is_empty());
    assert!(encoder_unchanged(&params, &out.params));
    assert!(out.params.contains("classifier.weight"));

    let cfg = FinetuneConfig {
        strategy: Strategy::Static,
        epochs: 1,
        static_iterations: 200,
        ..FinetuneConfig::default()
    };
    let out = finetune_loop(&params, &model, &tok, train, val, &cfg).unwrap();
    assert!(out.encoder_frozen);
    assert!(encoder_unchanged(&params, &out.params));
    assert_ne!(out.params.get("classifier.weight"), params.get("classifier.weight"));
}

#[test]
fn single_class_validation_is_rejected() {
    let (notes, tok, model) = setup(0.3, 40);
    let params: ParameterSet<f32> = init_params(&model).unwrap();
    let negatives: Vec<LabeledNote> = notes.iter().filter(|n| !n.label).cloned().collect();
    let r = finetune_loop(&params, &model, &tok, &notes, &negatives, &FinetuneConfig::default());
    assert!(matches!(r, Err(FinetuneError::SingleClassData)));
}

#[test]
fn learns_planted_signal_reproducibly() {
    let (notes, tok, model) = setup(0.3, 60);
    let params: ParameterSet<f32> = init_params(&model).unwrap();
    let (train, val) = notes.split_at(42);
    let cfg = FinetuneConfig {
        epochs: 4,
        eval_every_batches: 5,
        learning_rate: 3e-3,
        seed: 8,
        ..FinetuneConfig::default()
    };
    let a = finetune_loop(&params, &model, &tok, train, val, &cfg).unwrap();
    let best = a.best_val_auc.unwrap();
    assert!(best >= 0.9, "best validation AUC {best}");
    assert!(a.log.iter().any(|r| r.snapshot_taken));
    let b = finetune_loop(&params, &model, &tok, train, val, &cfg).unwrap();
    assert!(a.params.bitwise_eq(&b.params));
    assert_eq!(a.best_step, b.best_step);

    let vnotes: Vec<NoteDocument> = val.iter().map(|n| n.note.clone()).collect();
    let p = predict_notes(&a.params, &model, &tok, &cfg, &vnotes).unwrap();
    assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(p, predict_notes(&a.params, &model, &tok, &cfg, &vnotes).unwrap());
}

#[test]
fn pooled_gradient_matches_finite_difference() {
    // routing through the max must agree with perturbing the encoder
    let (_, tok, model) = setup(0.2, 20);
    let model = ModelConfig { dropout_rate: 0.0, init_std: 0.3, ..model };
    let params: ParameterSet<f32> = init_params(&model).unwrap();
    let cfg = FinetuneConfig::default();
    let n = note("g", "tagu bemi oliguria. pa ko. lu ti ma ne.");
    let loss = |p: &ParameterSet<f32>| {
        let f = forward_note(p, &model, &tok, &cfg, &n, false, 0).unwrap();
        f.embedding.vector.iter().enumerate().map(|(i, v)| (i as f64 * 0.3).sin() * *v as f64).sum::<f64>()
    };
    let fwd = forward_note(&params, &model, &tok, &cfg, &n, false, 0).unwrap();
    let d: Vec<f32> = (0..model.hidden_dim).map(|i| (i as f64 * 0.3).sin() as f32).collect();
    let mut g = params.zeros_like();
    note_backward(&params, &model, &cfg, &fwd, &d, &mut g);
    for (name, idx) in [("pooler.bias", 3), ("layer.0.ffn.output.weight", 17), ("embeddings.ln.gamma", 5)] {
        let h = 1e-2f32;
        let (mut a, mut b) = (params.clone(), params.clone());
        a.data_mut(name)[idx] += h;
        b.data_mut(name)[idx] -= h;
        let num = (loss(&a) - loss(&b)) / (2.0 * h as f64);
        let ana = g.data(name)[idx] as f64;
        assert!((num - ana).abs() < 2e-2 * ana.abs().max(0.05), "{name}: {num} vs {ana}");
    }
}
