//! Generates a small synthetic cohort and summarizes each night: stage
//! distribution and the spectral centroid per stage.
//!
//! cargo run --release --example synthetic_cohort -- [seed]

use seqsleep::data_io::{generate_synthetic_cohort, CohortSpec, SleepStage, NUM_STAGES};
use seqsleep::preprocessing::{segment_epochs, stft_epoch, SpectrogramParams};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed: u64 = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(1);
    let spec = CohortSpec { subjects: 3, epochs_per_night: 120, ..CohortSpec::default() };
    let params = SpectrogramParams::default();
    println!("{:<8} {:>5} {:>5}  {}", "subject", "night", "mins", "W/N1/N2/N3/REM share, centroid Hz");
    for rec in generate_synthetic_cohort(&spec, seed)? {
        let seg = segment_epochs(&rec)?;
        let mut counts = [0usize; NUM_STAGES];
        let mut centroid = [0.0; NUM_STAGES];
        for e in &seg.epochs {
            let image = stft_epoch(&e.samples, &params)?;
            let power: Vec<f64> = (0..image.freq_bins()).map(|f| image.row(f).iter().map(|v| (2.0 * v).exp()).sum()).collect();
            let total: f64 = power.iter().sum();
            centroid[e.stage.index()] += power.iter().enumerate().map(|(f, p)| f as f64 * params.bin_hz() * p).sum::<f64>() / total;
            counts[e.stage.index()] += 1;
        }
        let cells: Vec<String> = SleepStage::ALL
            .iter()
            .map(|s| {
                let k = s.index();
                let c = if counts[k] > 0 { centroid[k] / counts[k] as f64 } else { f64::NAN };
                format!("{}:{:.2}/{:.1}", s.name(), counts[k] as f64 / seg.epochs.len() as f64, c)
            })
            .collect();
        println!("{:<8} {:>5} {:>5.0}  {}", rec.subject_id, rec.night_index, rec.duration_sec() / 60.0, cells.join("  "));
    }
    Ok(())
}
