use pis_core::encoder::EncoderConfig;
use pis_core::physchem::SasaParams;
use pis_core::synth::{generate_set, HmmSpec};
use pis_core::trainer::*;

fn small_data() -> Dataset {
    let set = generate_set(&HmmSpec::default(), 4, 300, 11).unwrap();
    let trajs: Vec<_> = set.into_iter().map(|(t, _)| t).collect();
    Dataset::from_trajectories(&trajs, 10, &SasaParams::default()).unwrap()
}

fn small_config() -> TrainConfig {
    TrainConfig {
        lag: 1,
        batch_size: 256,
        epochs_stage1: 2,
        epochs_stage2: 3,
        warmup_epochs: 1,
        validation_fraction: 0.25,
        encoder: EncoderConfig { n_layers: 2, d_h: 8, ..EncoderConfig::default() },
        ..TrainConfig::default()
    }
}

#[test]
fn runs_are_deterministic_and_stage2_is_constrained() {
    let data = small_data();
    let cfg = small_config();
    let a = train(&data, &cfg, &mut |_| true).unwrap();
    let b = train(&data, &cfg, &mut |_| true).unwrap();
    assert!(a.aborted.is_none(), "{:?}", a.aborted);
    assert_eq!(a.model.history, b.model.history);
    assert_eq!(a.model.history.len(), 5);
    assert_eq!(a.model.checkpoint_bytes(), b.model.checkpoint_bytes());

    let k = a.model.koopman.as_ref().unwrap();
    assert!(k.row_sum_residual() < 1e-8);
    assert!(k.detailed_balance_residual() < 1e-6);
    assert!(k.stationarity_residual() < 1e-6);
    assert!(k.k.iter().flatten().all(|&v| v >= 0.0));
    let h = &a.model.history;
    assert!(h[4].val_score > 0.8 * h[1].val_score, "{h:?}");
    for r in &a.model.history {
        assert!(r.train_score.is_finite() && r.val_score.is_finite());
        assert!(r.val_score <= 4.0 + 1e-6);
    }
}

#[test]
fn zero_learning_rate_keeps_scores_constant() {
    let data = small_data();
    let cfg = TrainConfig { lr_stage1: 0.0, epochs_stage2: 0, ..small_config() };
    let out = train(&data, &cfg, &mut |_| true).unwrap();
    let h = &out.model.history;
    assert_eq!(h.len(), 2);
    assert_eq!(h[0].train_score, h[1].train_score);
    assert_eq!(h[0].val_score, h[1].val_score);
}

#[test]
fn observer_can_end_a_stage() {
    let data = small_data();
    let cfg = TrainConfig { epochs_stage1: 5, epochs_stage2: 0, ..small_config() };
    let out = train(&data, &cfg, &mut |p| p.epoch < 2).unwrap();
    assert_eq!(out.model.history.len(), 2);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let data = small_data();
    let out = train(&data, &small_config(), &mut |_| true).unwrap();
    let bytes = out.model.checkpoint_bytes();
    let sidecar: Sidecar = serde_json::from_str(&serde_json::to_string(&out.model.sidecar()).unwrap()).unwrap();
    assert_eq!(sidecar, out.model.sidecar());
    let back = Model::from_parts(&bytes, sidecar).unwrap();
    assert_eq!(back.checkpoint_bytes(), bytes);
    let frames: Vec<usize> = (0..50).collect();
    assert_eq!(back.chi(&data, &frames).unwrap(), out.model.chi(&data, &frames).unwrap());
    assert!(Model::from_parts(&bytes[..bytes.len() - 3], back.sidecar()).is_err());
}

#[test]
fn split_is_by_trajectory() {
    let data = small_data();
    let s = split(&data, 0.25, 3).unwrap();
    assert_eq!(s.val.len(), 1);
    assert_eq!(s.train.len(), 3);
    assert!(s.val.iter().all(|v| v.1 == 300 && v.0 % 300 == 0));
}

#[test]
fn lag_longer_than_trajectories_is_rejected() {
    let data = small_data();
    let cfg = TrainConfig { lag: 400, ..small_config() };
    assert!(train(&data, &cfg, &mut |_| true).is_err());
}
