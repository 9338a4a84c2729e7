//! Sleep-staging metrics from a confusion matrix and geometric fusion of
//! overlapping sequence posteriors.
//!
//! cargo run --release --example metrics

use seqsleep::data_io::{SleepStage, NUM_STAGES};
use seqsleep::evaluation::{aggregate_epoch_posteriors, compute_metrics, ConfusionMatrix, FusionMode};
use seqsleep::model::PosteriorSequence;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let counts = [
        [120, 10, 4, 0, 6],
        [12, 30, 20, 0, 18],
        [3, 9, 300, 25, 13],
        [0, 0, 30, 110, 0],
        [5, 14, 16, 0, 105],
    ];
    let cm = ConfusionMatrix::from_counts(counts);
    let m = compute_metrics(&cm)?;
    println!("{} epochs: acc {:.3} kappa {:.3} MF1 {:.3} sens {:.3} spec {:.3}", m.n_epochs, m.accuracy, m.kappa, m.macro_f1, m.sensitivity, m.specificity);
    for (stage, c) in SleepStage::ALL.iter().zip(&m.per_class) {
        println!("  {:<4} precision {:.3} recall {:.3} F1 {:.3}", stage.name(), c.precision, c.recall, c.f1);
    }

    // Two length-3 sequences starting at epochs 0 and 1 overlap on epochs 1 and 2.
    let p = |v: [f64; NUM_STAGES]| v;
    let a = PosteriorSequence { probs: vec![p([0.7, 0.1, 0.1, 0.05, 0.05]), p([0.2, 0.5, 0.2, 0.05, 0.05]), p([0.1, 0.3, 0.5, 0.05, 0.05])] };
    let b = PosteriorSequence { probs: vec![p([0.1, 0.2, 0.6, 0.05, 0.05]), p([0.05, 0.1, 0.7, 0.1, 0.05]), p([0.05, 0.05, 0.2, 0.6, 0.1])] };
    for mode in [FusionMode::Geometric, FusionMode::LastWins] {
        let fused = aggregate_epoch_posteriors(&[(0, &a), (1, &b)], 4, mode)?;
        let stages: Vec<&str> = fused.iter().map(|f| f.stage.name()).collect();
        println!("{mode:?} fusion: {}", stages.join(" "));
    }
    Ok(())
}
