//! Personalizes one target subject for several α and prints second-night
//! accuracy at every snapshot.
//!
//! cargo run --release --example personalize_alpha_sweep -- [seed]

use seqsleep::data_io::{generate_synthetic_cohort, CohortSpec};
use seqsleep::evaluation::score_night;
use seqsleep::study::{prepare_all, StudyConfig};
use seqsleep::training::{personalize, pretrain, FinetuneConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed: u64 = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(1);
    let cfg = StudyConfig::desk_scale();
    let source = prepare_all(&generate_synthetic_cohort(&cfg.source, seed)?, &cfg.spectrogram, cfg.norm_axis)?;
    let target_spec = CohortSpec { subjects: 1, first_subject: cfg.source.subjects, ..cfg.target.clone() };
    let target = prepare_all(&generate_synthetic_cohort(&target_spec, seed)?, &cfg.spectrogram, cfg.norm_axis)?;
    let (night1, night2) = (&target[0], &target[1]);

    let si = pretrain(&source, &[], &cfg.model, &cfg.pretrain, seed)?.checkpoint;
    let before = score_night(&si.params, night2, cfg.eval_stride, cfg.fusion)?.metrics.accuracy;
    println!("{}: SI accuracy on night 2 {:.1}%", night2.subject_id, 100.0 * before);
    for alpha in [0.0, 0.2, 0.4, 0.6, 0.8] {
        let ft = FinetuneConfig { alpha, seed, ..cfg.finetune.clone() };
        let out = personalize(&si, night1, &ft)?;
        let mut accs = Vec::new();
        for snap in &out.snapshots {
            accs.push(format!("{:.1}", 100.0 * score_night(&snap.checkpoint.params, night2, cfg.eval_stride, cfg.fusion)?.metrics.accuracy));
        }
        println!("alpha {alpha:.1}: {}", accs.join(" "));
    }
    Ok(())
}
