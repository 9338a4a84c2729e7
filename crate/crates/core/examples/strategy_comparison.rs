//! Compares the four finetuning strategies on one target subject at fixed
//! α and reports which parameter groups each one changed.
//!
//! cargo run --release --example strategy_comparison -- [alpha]

use seqsleep::data_io::{generate_synthetic_cohort, CohortSpec};
use seqsleep::evaluation::score_night;
use seqsleep::model::{select_groups, Strategy};
use seqsleep::study::{prepare_all, StudyConfig};
use seqsleep::training::{personalize, pretrain, FinetuneConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let alpha: f64 = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(0.4);
    let cfg = StudyConfig::desk_scale();
    let source = prepare_all(&generate_synthetic_cohort(&cfg.source, 2)?, &cfg.spectrogram, cfg.norm_axis)?;
    let target_spec = CohortSpec { subjects: 1, first_subject: cfg.source.subjects, ..cfg.target.clone() };
    let target = prepare_all(&generate_synthetic_cohort(&target_spec, 2)?, &cfg.spectrogram, cfg.norm_axis)?;

    let si = pretrain(&source, &[], &cfg.model, &cfg.pretrain, 2)?.checkpoint;
    let before = score_night(&si.params, &target[1], cfg.eval_stride, cfg.fusion)?.metrics.accuracy;
    println!("SI accuracy on night 2: {:.1}%", 100.0 * before);
    for strategy in Strategy::ALL {
        let t = std::time::Instant::now();
        let ft = FinetuneConfig { strategy, alpha, ..cfg.finetune.clone() };
        let out = personalize(&si, &target[0], &ft)?;
        let last = &out.snapshots.last().expect("at least one snapshot").checkpoint;
        let after = score_night(&last.params, &target[1], cfg.eval_stride, cfg.fusion)?.metrics.accuracy;
        let (trainable, frozen) = select_groups(&si.params, strategy);
        let changed = trainable.iter().filter(|n| last.params.tensors[*n] != si.params.tensors[*n]).count();
        let frozen_same = frozen.iter().all(|n| last.params.tensors[n] == si.params.tensors[n]);
        println!(
            "{:<12} after {:.1}% ({:+.1} pp)  trained tensors changed {changed}/{}  frozen untouched {frozen_same}  {:.1}s",
            strategy.name(),
            100.0 * after,
            100.0 * (after - before),
            trainable.len(),
            t.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
