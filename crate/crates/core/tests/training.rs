//! End-to-end training behaviour: reproducibility, persistence and failure handling.

mod common;

use common::{param_bits, tiny_training, without_seconds};
use std::collections::HashSet;
use vqcsi::channel::sample_channels;
use vqcsi::checkpoint;
use vqcsi::config::QuantizerKind;
use vqcsi::model::Model;
use vqcsi::rng::{stream, Purpose};
use vqcsi::trainer::{evaluate, metrics_csv, test_set, train, usage_csv, Trainer};
use vqcsi::Error;

#[test]
fn identical_runs_are_bit_identical() {
    let cfg = tiny_training(21);
    let a = train(&cfg).unwrap();
    let b = train(&cfg).unwrap();
    assert_eq!(
        without_seconds(&metrics_csv(&cfg, a.metrics())),
        without_seconds(&metrics_csv(&cfg, b.metrics()))
    );
    assert_eq!(usage_csv(&cfg, a.usage()), usage_csv(&cfg, b.usage()));
    assert_eq!(param_bits(a.model()), param_bits(b.model()));

    let other = train(&tiny_training(22)).unwrap();
    assert_ne!(param_bits(a.model()), param_bits(other.model()));
}

#[test]
fn epoch_by_epoch_matches_a_single_run() {
    let cfg = tiny_training(5);
    let whole = train(&cfg).unwrap();
    let mut parts = Trainer::new(&cfg).unwrap();
    parts.run_epoch().unwrap();
    parts.run_epoch().unwrap();
    assert_eq!(param_bits(whole.model()), param_bits(parts.model()));
    assert_eq!(parts.steps(), 6);
}

#[test]
fn checkpoint_round_trip_preserves_evaluation() {
    let cfg = tiny_training(8);
    let trained = train(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    checkpoint::save(&path, &cfg, trained.model()).unwrap();
    let (cfg2, model2) = checkpoint::load(&path).unwrap();
    assert_eq!(cfg2, cfg);
    let before = evaluate(trained.model(), &cfg, 300, 1).unwrap();
    let after = evaluate(&model2, &cfg2, 300, 1).unwrap();
    assert_eq!(before.mean_sum_rate.to_bits(), after.mean_sum_rate.to_bits());
    assert_eq!(before.sample_sum_rates, after.sample_sum_rates);
}

#[test]
fn checkpoint_shape_mismatch_is_rejected() {
    let cfg = tiny_training(8);
    let model = Model::init(&cfg).unwrap();
    let mut wider = cfg.clone();
    wider.model.decoder_hidden = vec![32];
    assert!(matches!(model.check_compatible(&wider), Err(Error::Checkpoint(_))));
    assert!(matches!(Trainer::from_model(&wider, model), Err(Error::Checkpoint(_))));
}

#[test]
fn non_finite_parameters_abort_with_last_good_model() {
    let cfg = tiny_training(3);
    let mut model = Model::init(&cfg).unwrap();
    model.decoder.layers[0].bias.data_mut()[0] = f64::NAN;
    let before = param_bits(&model);
    let mut trainer = Trainer::from_model(&cfg, model).unwrap();
    match trainer.run() {
        Err(Error::Diverged { epoch, step, .. }) => assert_eq!((epoch, step), (1, 0)),
        other => panic!("expected divergence, got {other:?}"),
    }
    assert_eq!(param_bits(trainer.model()), before);
    assert!(trainer.metrics().is_empty());
}

#[test]
fn evaluation_channels_never_appear_in_training() {
    let cfg = tiny_training(11);
    let key = |c: &num_complex::Complex64| (c.re.to_bits(), c.im.to_bits());
    let eval = test_set(&cfg, 500, cfg.seed);
    let held_out: HashSet<_> = eval.batch.h.iter().map(key).collect();
    let steps = cfg.schedule.batches_per_epoch * cfg.schedule.epochs;
    for idx in 0..steps as u64 {
        let b = sample_channels(
            &cfg.channel,
            cfg.schedule.batch_size,
            &mut stream(cfg.seed, Purpose::TrainChannels, idx),
        );
        assert!(b.h.iter().all(|c| !held_out.contains(&key(c))));
    }
}

#[test]
fn sign_quantizer_trains_without_codebooks() {
    let mut cfg = tiny_training(4);
    cfg.model.quantizer = QuantizerKind::Sign;
    cfg.model.latent_dim = 6;
    cfg.model.codebooks = 2;
    cfg.model.bits_per_codebook = 3;
    cfg.validate().unwrap();
    let t = train(&cfg).unwrap();
    assert!(t.model().codebooks.iter().all(Vec::is_empty));
    assert_eq!(t.metrics().len(), 2);
    assert!(t.metrics().iter().all(|m| m.commitment == 0.0 && m.loss.is_finite()));
}
