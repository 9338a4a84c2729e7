//! Log-amplitude spectrogram of a 10 Hz test sine and per-night
//! normalization of a synthetic night.
//!
//! cargo run --release --example spectrogram

use std::f64::consts::PI;

use seqsleep::data_io::{generate_synthetic_cohort, CohortSpec};
use seqsleep::preprocessing::{prepare_night, stft_epoch, NormAxis, SpectrogramParams};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let params = SpectrogramParams::default();
    let sine: Vec<f64> = (0..params.epoch_len()).map(|i| (2.0 * PI * 10.0 * i as f64 / params.sample_rate).sin()).collect();
    let image = stft_epoch(&sine, &params)?;
    println!("image {} bins x {} frames, {:.3} Hz per bin", image.freq_bins(), image.frames(), params.bin_hz());
    let mean_row = |f: usize| image.row(f).iter().sum::<f64>() / image.frames() as f64;
    let peak = (0..image.freq_bins()).max_by(|&a, &b| mean_row(a).total_cmp(&mean_row(b))).unwrap();
    println!("10 Hz sine peaks at bin {peak} ({:.2} Hz)", peak as f64 * params.bin_hz());
    for f in peak.saturating_sub(3)..=peak + 3 {
        println!("  bin {f:>3}  {:>7.2}", mean_row(f));
    }

    let night = &generate_synthetic_cohort(&CohortSpec { subjects: 1, epochs_per_night: 60, ..CohortSpec::default() }, 7)?[0];
    let prepared = prepare_night(night, &params, NormAxis::PerBin)?;
    println!("\n{} epochs prepared from {} ({} excluded)", prepared.len(), night.subject_id, prepared.excluded);
    for f in [0, 10, 26, 60, 128] {
        let values: Vec<f64> = prepared.images.iter().flat_map(|im| im.row(f).iter().copied()).collect();
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64;
        println!("  bin {f:>3}: raw mean {:>7.3} sd {:.3}  normalized mean {:+.1e} sd {:.6}", prepared.norm.mean[f], prepared.norm.std[f], mean, var.sqrt());
    }
    Ok(())
}
