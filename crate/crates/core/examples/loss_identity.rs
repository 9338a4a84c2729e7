//! Shows that the full KL form and the cross-entropy form of the
//! personalization loss differ by the constant α·H(SI) and have identical
//! gradients, for each finetuning strategy.
//!
//! cargo run --release --example loss_identity

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seqsleep::data_io::{SleepStage, NUM_STAGES};
use seqsleep::losses::{loss_equivalence_check, LossConfig};
use seqsleep::model::{init_params, ModelConfig, Strategy};
use seqsleep::preprocessing::EpochImage;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = ModelConfig { freq_bins: 32, frames: 7, filters: 6, epb_hidden: 6, attention_size: 6, spb_hidden: 6, seq_len: 5, ..ModelConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 4 * cfg.seq_len;
    let images: Vec<EpochImage> =
        (0..n).map(|_| EpochImage::new(32, 7, (0..32 * 7).map(|_| rng.gen_range(-2.0..2.0)).collect())).collect();
    let labels: Vec<SleepStage> = (0..n).map(|_| SleepStage::from_index(rng.gen_range(0..NUM_STAGES)).unwrap()).collect();
    let seqs: Vec<&[EpochImage]> = images.chunks(cfg.seq_len).collect();
    let label_seqs: Vec<&[SleepStage]> = labels.chunks(cfg.seq_len).collect();
    let si = init_params(&cfg, 1)?;
    let personalized = init_params(&cfg, 2)?;

    println!("{:<12} {:>5} {:>14} {:>14} {:>12}", "strategy", "alpha", "KL - CE value", "alpha*(-H)", "max |dgrad|");
    for strategy in Strategy::ALL {
        for alpha in [0.2, 0.6, 1.0] {
            let r = loss_equivalence_check(&personalized, &si, &seqs, &label_seqs, &LossConfig { lambda: 1e-4, alpha }, strategy)?;
            println!("{:<12} {alpha:>5.1} {:>14.9} {:>14.9} {:>12.1e}", strategy.name(), r.value_gap, r.expected_gap, r.max_grad_diff);
        }
    }
    Ok(())
}
