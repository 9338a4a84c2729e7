//! Writes a synthetic night as EDF plus an EDF+ hypnogram, parses both back
//! and prepares the night from the parsed files.
//!
//! cargo run --release --example edf_roundtrip -- [out_dir]

use std::path::PathBuf;

use seqsleep::data_io::{generate_synthetic_cohort, parse_edf, CohortSpec, EdfFile};
use seqsleep::preprocessing::{prepare_night, NormAxis, SpectrogramParams};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(std::env::temp_dir);
    let rec = &generate_synthetic_cohort(&CohortSpec { subjects: 1, epochs_per_night: 40, ..CohortSpec::default() }, 3)?[0];

    let psg = EdfFile::single_channel("EEG Fpz-Cz", rec.sample_rate, &rec.signal, -500.0, 500.0, 30.0)?;
    let hyp = EdfFile::annotations_only(&rec.annotations);
    let (psg_path, hyp_path) = (dir.join("syn000_n1-PSG.edf"), dir.join("syn000_n1-Hypnogram.edf"));
    std::fs::write(&psg_path, psg.to_bytes())?;
    std::fs::write(&hyp_path, hyp.to_bytes())?;
    println!("wrote {} and {}", psg_path.display(), hyp_path.display());

    let mut parsed = parse_edf(&std::fs::read(&psg_path)?, "EEG Fpz-Cz")?;
    parsed.annotations = EdfFile::parse(&std::fs::read(&hyp_path)?)?.annotations()?;
    let max_err = rec.signal.iter().zip(&parsed.signal).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    println!("{} samples at {} Hz, max quantization error {max_err:.4} uV", parsed.signal.len(), parsed.sample_rate);
    println!("{} annotations, identical: {}", parsed.annotations.len(), parsed.annotations == rec.annotations);
    for a in parsed.annotations.iter().take(5) {
        println!("  {:>6.0}s  {:>5.0}s  {}", a.onset_sec, a.duration_sec, a.label);
    }

    let night = prepare_night(&parsed, &SpectrogramParams::default(), NormAxis::PerBin)?;
    println!("prepared {} epochs of {}x{} images", night.len(), night.freq_bins(), night.frames());
    Ok(())
}
