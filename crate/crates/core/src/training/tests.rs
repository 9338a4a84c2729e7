use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seqsleep_autodiff::Tensor;

use super::session::Session;
use super::*;
use crate::data_io::SleepStage;
use crate::losses::LossConfig;
use crate::model::{init_params, select_groups, Checkpoint, ModelConfig, Modes, Strategy};
use crate::preprocessing::{EpochImage, NormAxis, NormStats, PreparedNight};

fn tiny(batch_norm: bool) -> ModelConfig {
    ModelConfig {
        freq_bins: 8,
        frames: 4,
        filters: 3,
        epb_hidden: 3,
        attention_size: 3,
        spb_hidden: 3,
        seq_len: 3,
        recurrent_batch_norm: batch_norm,
    }
}

/// Images whose mean level depends on the stage, so there is signal to fit.
fn night(cfg: &ModelConfig, epochs: usize, seed: u64) -> PreparedNight {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels = Vec::with_capacity(epochs);
    let mut images = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let stage = SleepStage::from_index(rng.gen_range(0..5)).unwrap();
        let values = (0..cfg.freq_bins * cfg.frames)
            .map(|i| {
                let bin = i / cfg.frames;
                let bump = if bin % 5 == stage.index() { 1.5 } else { 0.0 };
                bump + rng.gen_range(-0.5..0.5)
            })
            .collect();
        labels.push(stage);
        images.push(EpochImage::new(cfg.freq_bins, cfg.frames, values));
    }
    PreparedNight {
        subject_id: "t".into(),
        night_index: 1,
        images,
        labels,
        norm: NormStats { axis: NormAxis::PerBin, mean: vec![0.0; cfg.freq_bins], std: vec![1.0; cfg.freq_bins] },
        excluded: 0,
    }
}

fn si(cfg: &ModelConfig) -> Checkpoint {
    Checkpoint { params: init_params(cfg, 11).unwrap(), seed: 11 }
}

fn ft(strategy: Strategy, alpha: f64, epochs: usize) -> FinetuneConfig {
    FinetuneConfig {
        strategy,
        alpha,
        learning_rate: 1e-2,
        finetune_epochs: epochs,
        snapshot_every: 2,
        batch_size: 4,
        seed: 5,
        ..FinetuneConfig::default()
    }
}

#[test]
fn adam_zero_gradient_keeps_parameters() {
    let cfg = tiny(false);
    let mut params = init_params(&cfg, 1).unwrap();
    let before = params.clone();
    let (trainable, _) = select_groups(&params, Strategy::Softmax);
    let mut state = AdamState::new(&params, &trainable).unwrap();
    let grads: BTreeMap<String, Tensor> =
        trainable.iter().map(|n| (n.clone(), Tensor::zeros(params.get(n).unwrap().shape()))).collect();
    adam_step(&mut params, &grads, &mut state, 1e-3).unwrap();
    assert_eq!(state.step, 1);
    assert_eq!(params, before);
}

#[test]
fn adam_constant_gradient_step_approaches_lr() {
    let cfg = tiny(false);
    let mut params = init_params(&cfg, 1).unwrap();
    let trainable: BTreeSet<String> = ["softmax.b".to_string()].into();
    let mut state = AdamState::new(&params, &trainable).unwrap();
    let g = 0.37;
    let grads: BTreeMap<String, Tensor> = [("softmax.b".to_string(), Tensor::full(&[1, 5], g))].into();
    let lr = 1e-3;
    // scalar recurrence of the update, independent of the implementation
    let (mut m, mut v) = (0.0f64, 0.0f64);
    for t in 1..=200 {
        let before = params.get("softmax.b").unwrap().data()[0];
        adam_step(&mut params, &grads, &mut state, lr).unwrap();
        let step = before - params.get("softmax.b").unwrap().data()[0];
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        let expected = lr * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
        assert!((step - expected).abs() < 1e-15, "step {t}: {step} vs {expected}");
        if t > 100 {
            assert!((step - lr).abs() < 1e-6 * lr + 1e-9);
        }
    }
}

#[test]
fn adam_rejects_frozen_and_missing_gradients() {
    let cfg = tiny(false);
    let mut params = init_params(&cfg, 1).unwrap();
    let trainable: BTreeSet<String> = ["softmax.b".to_string()].into();
    let mut state = AdamState::new(&params, &trainable).unwrap();
    let frozen: BTreeMap<String, Tensor> = [
        ("softmax.b".to_string(), Tensor::zeros(&[1, 5])),
        ("softmax.w".to_string(), Tensor::zeros(params.get("softmax.w").unwrap().shape())),
    ]
    .into();
    let err = adam_step(&mut params, &frozen, &mut state, 1e-3).unwrap_err();
    assert!(matches!(err, TrainingError::FrozenGradient(ref n) if n == "softmax.w"));
    let err = adam_step(&mut params, &BTreeMap::new(), &mut state, 1e-3).unwrap_err();
    assert!(matches!(err, TrainingError::MissingGradient(_)));
    assert_eq!(state.step, 0);
}

#[test]
fn frozen_groups_stay_bit_identical() {
    for batch_norm in [false, true] {
        let cfg = tiny(batch_norm);
        let n = night(&cfg, 20, 3);
        let si = si(&cfg);
        for strategy in Strategy::ALL {
            let out = personalize(&si, &n, &ft(strategy, 0.4, 4)).unwrap();
            assert_eq!(out.snapshots.len(), 2);
            let (trainable, frozen) = select_groups(&si.params, strategy);
            for snap in &out.snapshots {
                let p = &snap.checkpoint.params;
                for name in &frozen {
                    assert_eq!(p.tensors[name], si.params.tensors[name], "{strategy} {name}");
                }
                for (name, buf) in &p.buffers {
                    if !strategy.trains(crate::model::Group::of(name).unwrap()) {
                        assert_eq!(buf, &si.params.buffers[name], "{strategy} {name}");
                    }
                }
                assert!(trainable.iter().any(|t| p.tensors[t] != si.params.tensors[t]));
            }
        }
    }
}

#[test]
fn zero_alpha_matches_plain_finetuning_bit_for_bit() {
    let cfg = tiny(false);
    let n = night(&cfg, 20, 4);
    let si = si(&cfg);
    for strategy in [Strategy::All, Strategy::Softmax] {
        let a = personalize(&si, &n, &ft(strategy, 0.0, 4)).unwrap();
        let b = finetune_plain(&si, &n, &ft(strategy, 0.0, 4)).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn precomputed_frozen_blocks_match_full_graph() {
    for batch_norm in [false, true] {
        let cfg = tiny(batch_norm);
        let nights = vec![night(&cfg, 14, 6)];
        let seqs = super::pretrain::sequence_grid(&nights, cfg.seq_len, 1);
        for strategy in [Strategy::SpbSoftmax, Strategy::Softmax] {
            let mut losses = Vec::new();
            let mut finals = Vec::new();
            for precompute in [false, true] {
                let mut params = si(&cfg).params;
                let (trainable, _) = select_groups(&params, strategy);
                let mut adam = AdamState::new(&params, &trainable).unwrap();
                let loss = LossConfig { lambda: 1e-3, alpha: 0.0 };
                let modes = Modes::for_strategy(strategy);
                let mut s = Session::new(&params, &nights, seqs.clone(), &trainable, modes, loss, None, precompute).unwrap();
                let mut trace = Vec::new();
                for batch in [vec![0, 3, 5], vec![1, 2], vec![4, 6, 7, 8]] {
                    trace.push(s.step(&mut params, &mut adam, &batch, 1e-2).unwrap().unwrap());
                }
                losses.push(trace);
                finals.push(params);
            }
            assert_eq!(losses[0], losses[1], "{strategy}");
            assert_eq!(finals[0], finals[1], "{strategy}");
        }
    }
}

#[test]
fn personalization_is_deterministic_and_reduces_loss() {
    let cfg = tiny(false);
    let n = night(&cfg, 24, 7);
    let si = si(&cfg);
    let c = FinetuneConfig { learning_rate: 3e-3, ..ft(Strategy::All, 0.2, 6) };
    let a = personalize(&si, &n, &c).unwrap();
    let b = personalize(&si, &n, &c).unwrap();
    assert_eq!(a, b);
    assert!(a.epoch_losses.last().unwrap() < a.epoch_losses.first().unwrap());
    let other = personalize(&si, &n, &FinetuneConfig { seed: 6, ..c }).unwrap();
    assert_ne!(a.epoch_losses, other.epoch_losses);
}

#[test]
fn personalize_rejects_bad_inputs() {
    let cfg = tiny(false);
    let si = si(&cfg);
    let short = night(&cfg, 2, 1);
    assert!(matches!(personalize(&si, &short, &ft(Strategy::All, 0.2, 2)), Err(TrainingError::EmptyTrainingSet(_))));
    let wrong = night(&ModelConfig { freq_bins: 9, ..cfg.clone() }, 10, 1);
    assert!(matches!(personalize(&si, &wrong, &ft(Strategy::All, 0.2, 2)), Err(TrainingError::Shape(_))));
    let n = night(&cfg, 10, 1);
    let bad = FinetuneConfig { alpha: 1.5, ..ft(Strategy::All, 0.0, 2) };
    assert!(personalize(&si, &n, &bad).is_err());
    let bad = FinetuneConfig { snapshot_every: 0, ..ft(Strategy::All, 0.0, 2) };
    assert!(personalize(&si, &n, &bad).unwrap_err().to_string().contains("snapshot_every"));
}

#[test]
fn pretrain_keeps_best_validation_epoch() {
    let cfg = tiny(false);
    let train = vec![night(&cfg, 30, 1), night(&cfg, 30, 2)];
    let valid = vec![night(&cfg, 20, 3)];
    let pc = PretrainConfig { epochs: 4, learning_rate: 1e-2, batch_size: 4, stride: 2, ..PretrainConfig::default() };
    let out = pretrain(&train, &valid, &cfg, &pc, 9).unwrap();
    assert_eq!(out.log.len(), 4);
    let accs: Vec<f64> = out.log.iter().map(|l| l.valid_acc.unwrap()).collect();
    let best = accs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(accs[out.best_epoch - 1], best);
    assert_eq!(accs.iter().position(|&a| a == best).unwrap() + 1, out.best_epoch);
    let again = pretrain(&train, &valid, &cfg, &pc, 9).unwrap();
    assert_eq!(again.checkpoint, out.checkpoint);
    assert_eq!(again.log, out.log);
    // the retained checkpoint is exactly representable in the file format
    let bytes = out.checkpoint.to_bytes();
    assert_eq!(crate::model::read_checkpoint(&bytes[..]).unwrap(), out.checkpoint);
}

#[test]
fn pretrain_requires_training_sequences() {
    let cfg = tiny(false);
    let err = pretrain(&[], &[], &cfg, &PretrainConfig::default(), 0).unwrap_err();
    assert!(matches!(err, TrainingError::EmptyTrainingSet(_)));
    let err = pretrain(&[night(&cfg, 2, 0)], &[], &cfg, &PretrainConfig::default(), 0).unwrap_err();
    assert!(matches!(err, TrainingError::EmptyTrainingSet(_)));
}

#[test]
fn divergence_returns_last_good_checkpoint() {
    let cfg = tiny(false);
    let mut n = night(&cfg, 12, 2);
    let si = si(&cfg);
    let mut values = n.images[4].values().to_vec();
    values[0] = f64::NAN;
    n.images[4] = EpochImage::new(cfg.freq_bins, cfg.frames, values);
    match personalize(&si, &n, &ft(Strategy::All, 0.0, 2)) {
        Err(TrainingError::Diverged { epoch, last_good }) => {
            assert_eq!(epoch, 1);
            assert_eq!(*last_good, si);
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}
