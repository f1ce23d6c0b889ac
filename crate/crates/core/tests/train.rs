mod common;

use common::{randomize, small_config, synth, vocab_and_batch};
use dcran::auxgen::generate_aux;
use dcran::corpus::split_corpus;
use dcran::layers::ForwardCtx;
use dcran::predict::evaluate_corpus;
use dcran::text::pad_batch;
use dcran::train::{
    compute_loss_and_grads, step, train_loop, AdamW, Checkpoint, ModelParams, StepBatches, TrainConfig,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn batches(n: usize, seed: u64) -> (ModelParams, StepBatches) {
    let corpus = synth(16, 0.5, seed);
    let (vocab, absa) = vocab_and_batch(&corpus, n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (t, p) = generate_aux(&corpus.sentences[..n], &vocab, 1, &mut rng);
    let mut model = ModelParams::init(&small_config(vocab.len()), seed).unwrap();
    randomize(&mut model.store, seed);
    let b = StepBatches {
        absa,
        tsmtd: Some(pad_batch(t).unwrap()),
        prd: Some(pad_batch(p).unwrap()),
    };
    (model, b)
}

fn encoder_grads(model: &ModelParams, grads: &[dcran::autodiff::Tensor]) -> Vec<dcran::autodiff::Tensor> {
    model
        .store
        .ids()
        .filter(|&id| model.store.name(id).starts_with("encoder."))
        .map(|id| grads[id.index()].clone())
        .collect()
}

fn tiny_train_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 8,
        lr: 3e-3,
        ..Default::default()
    }
}

#[test]
fn zero_weight_makes_final_equal_main_loss() {
    let (model, b) = batches(4, 1);
    let cfg = TrainConfig {
        alpha: 0.0,
        ..Default::default()
    };
    let (l, _) = compute_loss_and_grads(&model, &b, &cfg, &mut ForwardCtx::eval()).unwrap();
    assert!(l.l_aux > 0.0);
    assert_eq!(l.l_final, l.l_absa);
}

#[test]
fn loss_identities_hold_for_any_weight() {
    let (model, b) = batches(4, 2);
    for alpha in [0.0, 0.3, 1.0, 2.5] {
        let cfg = TrainConfig {
            alpha,
            ..Default::default()
        };
        let (l, _) = compute_loss_and_grads(&model, &b, &cfg, &mut ForwardCtx::eval()).unwrap();
        assert!(l.identity_error(alpha) <= 1e-12);
    }
}

#[test]
fn disabled_auxiliary_tasks_leave_shared_gradient_untouched() {
    let (model, b) = batches(4, 3);
    let off = TrainConfig {
        enable_tsmtd: false,
        enable_prd: false,
        ..Default::default()
    };
    let main_only = StepBatches {
        absa: b.absa.clone(),
        tsmtd: None,
        prd: None,
    };
    let (l1, g1) = compute_loss_and_grads(&model, &b, &off, &mut ForwardCtx::eval()).unwrap();
    let (l2, g2) = compute_loss_and_grads(&model, &main_only, &TrainConfig::default(), &mut ForwardCtx::eval()).unwrap();
    assert_eq!(l1.l_aux, 0.0);
    assert_eq!(l1.l_final, l2.l_final);
    assert_eq!(encoder_grads(&model, &g1), encoder_grads(&model, &g2));

    let (_, g3) = compute_loss_and_grads(&model, &b, &TrainConfig::default(), &mut ForwardCtx::eval()).unwrap();
    assert_ne!(encoder_grads(&model, &g1), encoder_grads(&model, &g3));
}

#[test]
fn fixed_batch_is_fitted() {
    let corpus = synth(8, 0.5, 4);
    let (vocab, absa) = vocab_and_batch(&corpus, 8);
    let mut model = ModelParams::init(&small_config(vocab.len()), 4).unwrap();
    let cfg = TrainConfig {
        enable_tsmtd: false,
        enable_prd: false,
        lr: 3e-3,
        ..Default::default()
    };
    let b = StepBatches {
        absa,
        tsmtd: None,
        prd: None,
    };
    let mut opt = AdamW::new(&model.store);
    let first = step(&mut model, &mut opt, &b, &cfg, &mut ForwardCtx::eval()).unwrap().l_absa;
    let mut last = first;
    for _ in 1..300 {
        last = step(&mut model, &mut opt, &b, &cfg, &mut ForwardCtx::eval()).unwrap().l_absa;
    }
    assert!(last <= 0.1 * first, "{first} -> {last}");
}

#[test]
fn zero_epochs_returns_initial_parameters() {
    let corpus = synth(40, 0.5, 5);
    let (train, dev, _) = split_corpus(&corpus, 5);
    let cfg = tiny_train_config(0);
    let out = train_loop(&train, &dev, &small_config(0), &cfg).unwrap();
    assert!(out.log.is_empty());
    assert!(out.steps.is_empty());
    assert_eq!(out.best.epoch, 0);
    let init = ModelParams::init(&out.best.model_config, cfg.seed).unwrap();
    assert_eq!(out.best.params, init.store);
    assert_eq!(out.last.params, init.store);
}

#[test]
fn runs_are_deterministic_and_step_counts_cover_the_split() {
    let corpus = synth(40, 0.5, 6);
    let (train, dev, _) = split_corpus(&corpus, 6);
    let cfg = tiny_train_config(2);
    let a = train_loop(&train, &dev, &small_config(0), &cfg).unwrap();
    let b = train_loop(&train, &dev, &small_config(0), &cfg).unwrap();
    let text = |o: &dcran::train::TrainOutcome| {
        o.log.iter().map(|r| serde_json::to_string(r).unwrap()).collect::<Vec<_>>().join("\n")
    };
    assert_eq!(text(&a), text(&b));
    assert_eq!(a.last.to_bytes().unwrap(), b.last.to_bytes().unwrap());
    assert_eq!(a.steps.len(), 2 * train.len().div_ceil(8));

    let other = train_loop(&train, &dev, &small_config(0), &TrainConfig { seed: 8, ..cfg }).unwrap();
    assert_ne!(text(&a), text(&other));
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let corpus = synth(40, 0.5, 7);
    let (train, dev, test) = split_corpus(&corpus, 7);
    let cfg = tiny_train_config(1);
    let out = train_loop(&train, &dev, &small_config(0), &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.bin");
    out.last.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.params, out.last.params);
    assert_eq!(loaded.to_bytes().unwrap(), out.last.to_bytes().unwrap());
    let before = evaluate_corpus(&out.last.model().unwrap(), &out.last.vocab, cfg.flags(), &test, 16).unwrap();
    let after = evaluate_corpus(&loaded.model().unwrap(), &loaded.vocab, loaded.train_config.flags(), &test, 16).unwrap();
    assert_eq!(serde_json::to_string(&before).unwrap(), serde_json::to_string(&after).unwrap());
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let corpus = synth(20, 0.5, 8);
    let (train, dev, _) = split_corpus(&corpus, 8);
    let out = train_loop(&train, &dev, &small_config(0), &tiny_train_config(0)).unwrap();
    let bytes = out.last.to_bytes().unwrap();
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8]).is_err());
    let mut bad = bytes.clone();
    bad[0] ^= 0xff;
    assert!(Checkpoint::from_bytes(&bad).is_err());
    assert!(Checkpoint::from_bytes(&[]).is_err());
}

#[test]
fn sentences_longer_than_the_position_table_are_rejected() {
    let corpus = synth(20, 0.5, 9);
    let (train, dev, _) = split_corpus(&corpus, 9);
    let mcfg = dcran::encoder::ModelConfig {
        max_len: 4,
        ..small_config(0)
    };
    let err = train_loop(&train, &dev, &mcfg, &tiny_train_config(1)).unwrap_err();
    assert_eq!(err.exit_code(), 1);
}
