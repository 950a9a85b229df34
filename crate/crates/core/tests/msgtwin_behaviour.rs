use nettwin_core::msgcodec::{build_message_dataset, MessageDataset, MessageTrace, Vocabulary};
use nettwin_core::msgtwin::{
    corpus_loss, evaluate, fine_tune, generate_traces, predict_next_message, train_message_twin, LstmConfig,
    MessageModel, ModelConfig, MsgTwinError, TokenCorpus, TrainConfig, TransformerConfig,
};
use nettwin_core::netsim::{SimConfig, SliceKind};

fn small_sim() -> SimConfig {
    let mut cfg = SimConfig { horizon: 30.0, ..SimConfig::default() }.with_arrival_scale(0.08);
    cfg.max_concurrent_ues = 4;
    cfg
}

fn transformer(context: usize) -> ModelConfig {
    ModelConfig::Transformer(TransformerConfig {
        num_layers: 2,
        num_heads: 2,
        model_dim: 16,
        ff_dim: 32,
        context_length: context,
        ..Default::default()
    })
}

fn lstm(context: usize) -> ModelConfig {
    ModelConfig::Lstm(LstmConfig { num_layers: 2, hidden_dim: 16, embed_dim: 16, context_length: context, ..Default::default() })
}

fn corpus(cfg: &SimConfig, first_seed: u64, n: usize) -> (Vec<MessageTrace>, TokenCorpus) {
    let traces = generate_traces(cfg, first_seed, n).unwrap();
    let c = TokenCorpus::from_traces(&traces, &Vocabulary::default()).unwrap();
    (traces, c)
}

#[test]
fn toy_corpus_loss_halves_within_budget() {
    let (_, c) = corpus(&small_sim(), 0, 10);
    let mut model = MessageModel::new(&transformer(32), 1).unwrap();
    let cfg = TrainConfig { total_steps: 2000, batch_size: 4, learning_rate: 3e-3, eval_interval: 100, ..Default::default() };
    let report = train_message_twin(&mut model, &c, &cfg).unwrap();
    let first = report.loss_history[0].loss;
    let best = report.loss_history.iter().map(|p| p.loss).fold(f64::INFINITY, f64::min);
    assert!(best <= 0.5 * first, "loss went from {first} to {best}");
}

#[test]
fn same_seed_gives_identical_checkpoint() {
    let (_, c) = corpus(&small_sim(), 0, 3);
    let cfg = TrainConfig { total_steps: 20, batch_size: 2, eval_interval: 10, ..Default::default() };
    for arch in [transformer(24), lstm(24)] {
        let run = || {
            let mut m = MessageModel::new(&arch, 5).unwrap();
            train_message_twin(&mut m, &c, &cfg).unwrap();
            m.to_checkpoint().to_bytes()
        };
        assert_eq!(run(), run());
    }
}

#[test]
fn freezing_every_block_leaves_only_the_output_trainable() {
    let (_, c) = corpus(&small_sim(), 0, 3);
    for arch in [transformer(24), lstm(24)] {
        let layers = arch.num_layers();
        let mut m = MessageModel::new(&arch, 2).unwrap();
        let before = m.to_checkpoint();
        let cfg = TrainConfig { total_steps: 15, batch_size: 2, freeze_prefix_layers: layers, ..Default::default() };
        train_message_twin(&mut m, &c, &cfg).unwrap();
        let after = m.to_checkpoint();
        for ((name, a), (_, b)) in before.tensors.iter().zip(&after.tensors) {
            let output = name.starts_with("head.") || name.starts_with("ln_f.");
            assert_eq!(a != b, output, "{}: {name}", arch.label());
        }
    }
}

#[test]
fn fine_tune_with_everything_frozen_changes_nothing() {
    let (_, c) = corpus(&small_sim(), 0, 3);
    let arch = transformer(24);
    let mut m = MessageModel::new(&arch, 2).unwrap();
    let before = m.params.value_bytes();
    let cfg = TrainConfig { total_steps: 10, batch_size: 2, freeze_prefix_layers: arch.num_layers() + 1, ..Default::default() };
    let r = fine_tune(&mut m, &c, &cfg, 8).unwrap();
    assert_eq!(m.params.value_bytes(), before);
    assert_eq!(r.loss_before, r.loss_after);
}

#[test]
fn fine_tune_keeps_frozen_layers_and_never_raises_loss() {
    let (_, c) = corpus(&small_sim(), 0, 4);
    let arch = transformer(24);
    let mut m = MessageModel::new(&arch, 3).unwrap();
    train_message_twin(&mut m, &c, &TrainConfig { total_steps: 100, batch_size: 4, ..Default::default() }).unwrap();
    let before = m.to_checkpoint();
    let cfg = TrainConfig { total_steps: 50, batch_size: 4, freeze_prefix_layers: 1, seed: 9, ..Default::default() };
    let r = fine_tune(&mut m, &c, &cfg, 16).unwrap();
    assert!(r.loss_after <= r.loss_before);
    let after = m.to_checkpoint();
    for ((name, a), (_, b)) in before.tensors.iter().zip(&after.tensors) {
        if name.starts_with("emb.") || name.starts_with("block0.") {
            assert_eq!(a, b, "{name} moved");
        }
    }
    assert!((corpus_loss(&m, &c, 16, 9 ^ 0x5eed).unwrap() - r.loss_after).abs() < 1e-12);
}

#[test]
fn fine_tuning_beats_training_from_scratch_on_a_new_slice() {
    let base = small_sim();
    let (_, pre) = corpus(&base, 0, 10);
    // The new slice profile: hrllc sessions demand more and arrive more.
    let mut shifted = base.clone();
    let h = SliceKind::Hrllc.index();
    shifted.profiles[h].demand.radio *= 3;
    shifted.profiles[h].arrival_rate *= 4.0;
    let (_, new_train) = corpus(&shifted, 100, 4);
    let (_, new_test) = corpus(&shifted, 200, 4);
    let arch = transformer(24);
    let mut pretrained = MessageModel::new(&arch, 0).unwrap();
    train_message_twin(&mut pretrained, &pre, &TrainConfig { total_steps: 1500, batch_size: 4, learning_rate: 3e-3, ..Default::default() })
        .unwrap();
    let ckpt = pretrained.to_checkpoint();
    let mut wins = Vec::new();
    for seed in 0..5u64 {
        let cfg = TrainConfig { total_steps: 500, batch_size: 4, learning_rate: 3e-3, seed, ..Default::default() };
        let mut tuned = MessageModel::from_checkpoint(&ckpt).unwrap();
        fine_tune(&mut tuned, &new_train, &TrainConfig { freeze_prefix_layers: 1, ..cfg.clone() }, 16).unwrap();
        let mut scratch = MessageModel::new(&arch, 100 + seed).unwrap();
        train_message_twin(&mut scratch, &new_train, &cfg).unwrap();
        let tuned_loss = corpus_loss(&tuned, &new_test, 64, 7).unwrap();
        let scratch_loss = corpus_loss(&scratch, &new_test, 64, 7).unwrap();
        wins.push(scratch_loss - tuned_loss);
    }
    wins.sort_by(f64::total_cmp);
    assert!(wins[2] > 0.0, "median advantage {} (all {wins:?})", wins[2]);
}

#[test]
fn predictions_ignore_future_trace_content() {
    let vocab = Vocabulary::default();
    let cfg = small_sim();
    let traces = generate_traces(&cfg, 3, 1).unwrap();
    let trace = &traces[0];
    let cut = trace.messages.len() / 2;
    let mut altered = trace.clone();
    altered.messages.truncate(cut);
    let other = generate_traces(&cfg, 4, 1).unwrap();
    altered.messages.extend(other[0].messages.iter().cloned());
    let a = build_message_dataset(trace, 48, &vocab).unwrap();
    let b = build_message_dataset(&altered, 48, &vocab).unwrap();
    let shared = trace.messages[..cut].iter().filter(|m| m.is_control_plane()).count();
    assert!(shared > 0);
    for arch in [transformer(48), lstm(48)] {
        let model = MessageModel::new(&arch, 1).unwrap();
        for i in 0..shared {
            assert_eq!(a[i].history, b[i].history);
            let pa = predict_next_message(&model, &a[i].history, &vocab, None).unwrap();
            let pb = predict_next_message(&model, &b[i].history, &vocab, None).unwrap();
            assert_eq!(pa, pb);
        }
    }
}

#[test]
fn evaluation_refuses_training_traces() {
    let vocab = Vocabulary::default();
    let (traces, c) = corpus(&small_sim(), 0, 2);
    let mut m = MessageModel::new(&transformer(24), 0).unwrap();
    train_message_twin(&mut m, &c, &TrainConfig { total_steps: 2, batch_size: 1, ..Default::default() }).unwrap();
    let leaky = MessageDataset::from_traces(&traces, 24, &vocab).unwrap();
    assert!(matches!(evaluate(&m, &leaky, &vocab, 10), Err(MsgTwinError::TraceLeak)));
    let fresh = MessageDataset::from_traces(&generate_traces(&small_sim(), 50, 1).unwrap(), 24, &vocab).unwrap();
    let metrics = evaluate(&m, &fresh, &vocab, 10).unwrap();
    for v in [metrics.message_accuracy, metrics.token_accuracy, metrics.ie_recall, metrics.ie_precision, metrics.decode_failure_rate] {
        assert!((0.0..=1.0).contains(&v));
    }
}

#[test]
fn mismatched_vocabulary_is_rejected() {
    let (_, mut c) = corpus(&small_sim(), 0, 1);
    c.vocab_size += 1;
    let mut m = MessageModel::new(&lstm(24), 0).unwrap();
    let r = train_message_twin(&mut m, &c, &TrainConfig { total_steps: 1, ..Default::default() });
    assert!(matches!(r, Err(MsgTwinError::ConfigMismatch(_))));
}
