//! Pretrains a small subject-independent model on a synthetic source cohort,
//! saves the checkpoint and scores a held-out subject with the reloaded copy.
//!
//! cargo run --release --example pretrain_si -- [out.ckpt]

use std::path::PathBuf;

use seqsleep::data_io::generate_synthetic_cohort;
use seqsleep::evaluation::{score_night, FusionMode};
use seqsleep::model::Checkpoint;
use seqsleep::study::{prepare_all, StudyConfig};
use seqsleep::training::pretrain;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("si.ckpt"));
    let cfg = StudyConfig::desk_scale();
    let nights = prepare_all(&generate_synthetic_cohort(&cfg.source, 1)?, &cfg.spectrogram, cfg.norm_axis)?;
    let (train, valid) = nights.split_at(nights.len() - cfg.source.nights_per_subject);
    println!("training on {} nights, validating on {}", train.len(), valid.len());

    let out = pretrain(train, valid, &cfg.model, &cfg.pretrain, 1)?;
    for l in &out.log {
        println!("epoch {:>2}  loss {:.4}  valid acc {:.3}", l.epoch, l.train_loss, l.valid_acc.unwrap_or(f64::NAN));
    }
    println!("retained epoch {}", out.best_epoch);
    out.checkpoint.save(&path)?;
    let loaded = Checkpoint::load(&path)?;
    println!("saved {} ({} values), reload identical: {}", path.display(), loaded.params.num_values(), loaded == out.checkpoint);

    for night in valid {
        let score = score_night(&loaded.params, night, 1, FusionMode::Geometric)?;
        let m = &score.metrics;
        println!(
            "{} night {}: acc {:.3} kappa {:.3} MF1 {:.3}",
            night.subject_id, night.night_index, m.accuracy, m.kappa, m.macro_f1
        );
    }
    Ok(())
}
