//! Grades target subjects by their first-night SI accuracy against β and
//! reports the mean personalization gain per group.
//!
//! cargo run --release --example personalize_gate -- [beta]

use seqsleep::data_io::{generate_synthetic_cohort, CohortSpec};
use seqsleep::evaluation::{experiment_report, DEFAULT_BETA};
use seqsleep::model::Strategy;
use seqsleep::study::{personalize_subject, prepare_all, StudyConfig};
use seqsleep::training::pretrain;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let beta: f64 = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(DEFAULT_BETA);
    let cfg = StudyConfig::desk_scale();
    let source = prepare_all(&generate_synthetic_cohort(&cfg.source, 3)?, &cfg.spectrogram, cfg.norm_axis)?;
    let target_spec = CohortSpec { first_subject: cfg.source.subjects, ..cfg.target.clone() };
    let target = prepare_all(&generate_synthetic_cohort(&target_spec, 3)?, &cfg.spectrogram, cfg.norm_axis)?;
    let si = pretrain(&source, &[], &cfg.model, &cfg.pretrain, 3)?.checkpoint;

    let mut rows = Vec::new();
    for nights in target.chunks(cfg.target.nights_per_subject) {
        let runs = [(Strategy::All, 0.4)];
        rows.extend(personalize_subject(&si, &nights[0], &nights[1], &runs, &cfg.finetune, cfg.eval_stride, cfg.fusion)?);
    }
    let report = experiment_report(&rows, beta)?;
    println!("{:<8} {:>6} {:>7} {:>7} {:>7}  group", "subject", "gate", "before", "after", "gain");
    for p in &report.scatter {
        println!(
            "{:<8} {:>6.1} {:>7.1} {:>7.1} {:>+7.1}  {:?}",
            p.subject,
            100.0 * p.gate_accuracy,
            100.0 * p.before,
            100.0 * p.after,
            100.0 * p.improvement,
            p.group
        );
    }
    for g in &report.groups {
        println!("{:?} (beta {beta}): {} subjects, mean gain {:+.1} pp", g.group, g.n, 100.0 * g.mean_improvement);
    }
    Ok(())
}
