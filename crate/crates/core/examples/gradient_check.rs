//! Finite-difference check of the personalization loss gradients on a tiny
//! model, per parameter group and α.
//!
//! cargo run --release --example gradient_check

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seqsleep::data_io::{SleepStage, NUM_STAGES};
use seqsleep::losses::{
    label_tensor, personalization_graph, posterior_tensor, KlForm, LossConfig, INPUT_LABELS, INPUT_SI_PROBS,
};
use seqsleep::model::{batch_images, forward_batch, init_params, BuiltModel, ModelConfig, Modes, INPUT_IMAGES};
use seqsleep::preprocessing::EpochImage;
use seqsleep_autodiff::grad_check;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = ModelConfig {
        freq_bins: 16,
        frames: 5,
        filters: 4,
        epb_hidden: 4,
        attention_size: 4,
        spb_hidden: 4,
        seq_len: 3,
        recurrent_batch_norm: false,
    };
    let (batch, n) = (2, 2 * cfg.seq_len);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let images: Vec<EpochImage> = (0..n)
        .map(|_| EpochImage::new(16, 5, (0..80).map(|_| rng.gen_range(-1.0..1.0)).collect()))
        .collect();
    let labels: Vec<SleepStage> = (0..n).map(|_| SleepStage::from_index(rng.gen_range(0..NUM_STAGES)).unwrap()).collect();
    let seqs: Vec<&[EpochImage]> = images.chunks(cfg.seq_len).collect();
    let label_seqs: Vec<&[SleepStage]> = labels.chunks(cfg.seq_len).collect();

    let si = init_params(&cfg, 2)?;
    let params = init_params(&cfg, 3)?;
    let si_post = forward_batch(&si, &seqs)?;
    let si_refs: Vec<_> = si_post.iter().collect();
    let mut inputs = BTreeMap::new();
    inputs.insert(INPUT_IMAGES.to_string(), batch_images(&params, &seqs)?);
    inputs.insert(INPUT_LABELS.to_string(), label_tensor(&label_seqs));
    inputs.insert(INPUT_SI_PROBS.to_string(), posterior_tensor(&si_refs));
    let names: Vec<&str> = params.tensors.keys().map(String::as_str).collect();

    for alpha in [0.0, 0.4, 0.8] {
        let mut built = BuiltModel::new(&cfg, batch, Modes::TRAIN);
        let loss_cfg = LossConfig { lambda: 1e-3, alpha };
        let loss = personalization_graph(&mut built.graph, built.probs, cfg.seq_len, &names, &loss_cfg, KlForm::CrossEntropy);
        let report = grad_check(&built.graph, loss, &params.tensors, &inputs, 1e-5, 1e-4, |name| {
            name.split('.').next().unwrap_or(name).to_string()
        })?;
        println!("alpha {alpha}: max relative error {:.2e} ({})", report.max_rel_error(), if report.passed() { "ok" } else { "FAIL" });
        for g in &report.groups {
            println!("  {:<12} {:.2e}", g.group, g.max_rel_error);
        }
    }
    Ok(())
}
