//! Runs the desk-scale synthetic personalization study for one seed and
//! prints the accuracy-vs-epoch curves and the study table.
//!
//! cargo run --release --example synthetic_study -- [seed]

use std::time::Instant;

use seqsleep::evaluation::{experiment_report, format_table, DEFAULT_BETA};
use seqsleep::study::{run_study, StudyConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed: u64 = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(1);
    let workers = std::env::var("SEQSLEEP_WORKERS").ok().and_then(|w| w.parse().ok()).unwrap_or(1);
    let cfg = StudyConfig::desk_scale();
    let t = Instant::now();
    let out = run_study(&cfg, seed, workers)?;
    for l in &out.pretrain_log {
        println!("pretrain epoch {:>2}  loss {:.4}  valid acc {:.3}", l.epoch, l.train_loss, l.valid_acc.unwrap_or(f64::NAN));
    }
    println!("retained epoch {}", out.best_epoch);
    let report = experiment_report(&out.rows, DEFAULT_BETA)?;
    for (key, curve) in &report.curves {
        let accs: Vec<String> = curve.iter().map(|p| format!("{:.1}", 100.0 * p.mean_acc)).collect();
        println!("{key:<20} {}", accs.join(" "));
    }
    print!("{}", format_table(&report));
    println!("elapsed {:.1}s", t.elapsed().as_secs_f64());
    Ok(())
}
