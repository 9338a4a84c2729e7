use proptest::prelude::*;
use seqsleep::data_io::{SleepStage, NUM_STAGES};
use seqsleep::evaluation::{aggregate_epoch_posteriors, compute_metrics, ConfusionMatrix, FusionMode};
use seqsleep::losses::{kl_cross_entropy, kl_divergence, personalization_loss, KlForm, LossConfig};
use seqsleep::model::{init_params, ModelConfig, PosteriorSequence};
use seqsleep::preprocessing::{per_night_normalize, EpochImage, NormAxis};

fn distribution() -> impl Strategy<Value = [f64; NUM_STAGES]> {
    prop::array::uniform5(0.01f64..1.0).prop_map(|w| {
        let s: f64 = w.iter().sum();
        w.map(|v| v / s)
    })
}

fn posterior(len: usize) -> impl Strategy<Value = PosteriorSequence> {
    prop::collection::vec(distribution(), len).prop_map(|probs| PosteriorSequence { probs })
}

fn counts() -> impl Strategy<Value = [[u64; NUM_STAGES]; NUM_STAGES]> {
    prop::array::uniform5(prop::array::uniform5(0u64..50)).prop_map(|mut c| {
        c[0][0] += 1;
        c
    })
}

fn tiny_params() -> seqsleep::model::ModelParams {
    let cfg = ModelConfig {
        freq_bins: 8,
        frames: 3,
        filters: 2,
        epb_hidden: 2,
        attention_size: 2,
        spb_hidden: 2,
        seq_len: 4,
        recurrent_batch_norm: false,
    };
    init_params(&cfg, 0).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn metrics_are_invariant_to_relabeling_classes(c in counts(), perm in Just([0usize, 1, 2, 3, 4]).prop_shuffle()) {
        let mut permuted = [[0u64; NUM_STAGES]; NUM_STAGES];
        for t in 0..NUM_STAGES {
            for p in 0..NUM_STAGES {
                permuted[perm[t]][perm[p]] = c[t][p];
            }
        }
        let a = compute_metrics(&ConfusionMatrix::from_counts(c)).unwrap();
        let b = compute_metrics(&ConfusionMatrix::from_counts(permuted)).unwrap();
        for (x, y) in [(a.accuracy, b.accuracy), (a.kappa, b.kappa), (a.macro_f1, b.macro_f1), (a.sensitivity, b.sensitivity), (a.specificity, b.specificity)] {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn metrics_stay_in_range(c in counts()) {
        let m = compute_metrics(&ConfusionMatrix::from_counts(c)).unwrap();
        for v in [m.accuracy, m.macro_f1, m.sensitivity, m.specificity] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!(m.kappa <= 1.0 && m.kappa >= -1.0);
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_itself(q in posterior(6), p in posterior(6)) {
        prop_assert!(kl_divergence(&q, &p).unwrap() >= -1e-12);
        prop_assert!(kl_divergence(&q, &q).unwrap().abs() < 1e-9);
        // Cross-entropy form differs by the SI entropy, which is nonnegative.
        prop_assert!(kl_cross_entropy(&q, &p).unwrap() + 1e-12 >= kl_divergence(&q, &p).unwrap());
    }

    #[test]
    fn personalization_loss_is_affine_in_alpha(
        q in posterior(4),
        p in posterior(4),
        labels in prop::collection::vec(0usize..NUM_STAGES, 4),
        a in 0.0f64..1.0,
        b in 0.0f64..1.0,
    ) {
        let params = tiny_params();
        let labels = vec![labels.into_iter().map(|i| SleepStage::from_index(i).unwrap()).collect::<Vec<_>>()];
        let (si, pers) = (vec![q], vec![p]);
        let names: Vec<&str> = params.tensors.keys().map(String::as_str).collect();
        let loss = |alpha: f64| {
            personalization_loss(&si, &pers, &labels, &params, names.iter().copied(), &LossConfig { lambda: 1e-3, alpha }, KlForm::Divergence).unwrap()
        };
        let mid = 0.5 * (a + b);
        prop_assert!((loss(mid) - 0.5 * (loss(a) + loss(b))).abs() < 1e-9);
    }

    #[test]
    fn normalized_night_has_unit_moments(
        values in prop::collection::vec(-20.0f64..20.0, 6 * 4 * 3),
        scale in 0.1f64..10.0,
        shift in -5.0f64..5.0,
    ) {
        let images: Vec<EpochImage> = values.chunks(12).map(|c| EpochImage::new(4, 3, c.to_vec())).collect();
        let (a, stats) = per_night_normalize(&images, NormAxis::PerBin).unwrap();
        prop_assume!(stats.std.iter().all(|&s| s > 1e-3));
        for f in 0..4 {
            let row: Vec<f64> = a.iter().flat_map(|im| im.row(f).to_vec()).collect();
            let mean = row.iter().sum::<f64>() / row.len() as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / row.len() as f64;
            prop_assert!(mean.abs() < 1e-9 && (var.sqrt() - 1.0).abs() < 1e-9);
        }
        // An affine change of the log images (gain and offset) is removed.
        let moved: Vec<EpochImage> = images
            .iter()
            .map(|im| EpochImage::new(4, 3, im.values().iter().map(|v| scale * v + shift).collect()))
            .collect();
        let (b, _) = per_night_normalize(&moved, NormAxis::PerBin).unwrap();
        for (x, y) in a.iter().zip(&b) {
            for (u, v) in x.values().iter().zip(y.values()) {
                prop_assert!((u - v).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn fused_posteriors_are_distributions(seqs in prop::collection::vec(posterior(3), 1..5)) {
        let with_start: Vec<(usize, &PosteriorSequence)> = seqs.iter().enumerate().collect();
        let n = seqs.len() + 2;
        for mode in [FusionMode::Geometric, FusionMode::LastWins] {
            let fused = aggregate_epoch_posteriors(&with_start, n, mode).unwrap();
            prop_assert_eq!(fused.len(), n);
            for f in &fused {
                prop_assert!((f.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                let best = (0..NUM_STAGES).max_by(|&i, &j| f.probs[i].total_cmp(&f.probs[j])).unwrap();
                prop_assert_eq!(f.stage.index(), best);
            }
        }
    }

    #[test]
    fn geometric_fusion_of_identical_posteriors_is_identity(q in posterior(3)) {
        let fused = aggregate_epoch_posteriors(&[(0, &q), (0, &q)], 3, FusionMode::Geometric).unwrap();
        for (f, p) in fused.iter().zip(&q.probs) {
            for c in 0..NUM_STAGES {
                prop_assert!((f.probs[c] - p[c]).abs() < 1e-12);
            }
        }
    }
}
