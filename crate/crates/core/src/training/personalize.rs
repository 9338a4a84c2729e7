use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::pretrain::{positive, rate, run_epoch, sequence_grid, shuffle_rng};
use super::session::Session;
use super::{AdamState, TrainingError};
use crate::losses::LossConfig;
use crate::model::{forward_batch, select_groups, Checkpoint, Modes, Strategy};
use crate::preprocessing::{EpochImage, PreparedNight};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub strategy: Strategy,
    /// Weight of the KL term; 0 is plain finetuning.
    pub alpha: f64,
    pub learning_rate: f64,
    pub finetune_epochs: usize,
    pub snapshot_every: usize,
    /// Sequences per minibatch.
    pub batch_size: usize,
    pub seed: u64,
    pub lambda: f64,
    /// Epochs between the starts of consecutive training sequences.
    pub stride: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::All,
            alpha: 0.0,
            learning_rate: 1e-4,
            finetune_epochs: 50,
            snapshot_every: 5,
            batch_size: 8,
            seed: 0,
            lambda: 1e-4,
            stride: 1,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<(), TrainingError> {
        positive(&[
            ("finetune_epochs", self.finetune_epochs),
            ("snapshot_every", self.snapshot_every),
            ("batch_size", self.batch_size),
            ("stride", self.stride),
        ])?;
        rate("learning_rate", self.learning_rate)?;
        self.loss().validate()?;
        Ok(())
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig { lambda: self.lambda, alpha: self.alpha }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    /// Finetuning epochs completed when the snapshot was taken.
    pub epoch: usize,
    pub checkpoint: Checkpoint,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PersonalizeOutcome {
    pub snapshots: Vec<Snapshot>,
    /// Mean batch loss per finetuning epoch.
    pub epoch_losses: Vec<f64>,
}

/// Finetunes a copy of the subject-independent model on one night,
/// minimizing `(1−α)·CE + (λ/2)‖Θᵖ‖² + α·H(P_SI, P)` over the groups the
/// strategy trains. The SI posteriors of every training sequence are
/// evaluated once with the untouched SI parameters.
pub fn personalize(si: &Checkpoint, night: &PreparedNight, cfg: &FinetuneConfig) -> Result<PersonalizeOutcome, TrainingError> {
    run(si, night, cfg, true)
}

/// Finetuning on the sequence classification loss alone, the α = 0
/// reference for [`personalize`].
pub fn finetune_plain(si: &Checkpoint, night: &PreparedNight, cfg: &FinetuneConfig) -> Result<PersonalizeOutcome, TrainingError> {
    run(si, night, &FinetuneConfig { alpha: 0.0, ..cfg.clone() }, false)
}

fn run(si: &Checkpoint, night: &PreparedNight, cfg: &FinetuneConfig, with_kl: bool) -> Result<PersonalizeOutcome, TrainingError> {
    cfg.validate()?;
    si.params.check_layout()?;
    let model = &si.params.config;
    if night.len() < model.seq_len {
        return Err(TrainingError::EmptyTrainingSet(format!(
            "night {} of {} has {} epochs, fewer than the sequence length {}",
            night.night_index,
            night.subject_id,
            night.len(),
            model.seq_len
        )));
    }
    if night.freq_bins() != model.freq_bins || night.frames() != model.frames {
        return Err(TrainingError::Shape(format!(
            "night images are {}x{}, the model expects {}x{}",
            night.freq_bins(),
            night.frames(),
            model.freq_bins,
            model.frames
        )));
    }
    let nights = std::slice::from_ref(night);
    let seqs = sequence_grid(nights, model.seq_len, cfg.stride);
    let si_posteriors = if with_kl && cfg.alpha > 0.0 {
        let images: Vec<&[EpochImage]> = seqs.iter().map(|s| &night.images[s.start..s.start + model.seq_len]).collect();
        Some(forward_batch(&si.params, &images)?)
    } else {
        None
    };

    let mut params = si.params.clone();
    let (trainable, _) = select_groups(&params, cfg.strategy);
    let mut adam = AdamState::new(&params, &trainable)?;
    let modes = Modes::for_strategy(cfg.strategy);
    let mut session = Session::new(&params, nights, seqs, &trainable, modes, cfg.loss(), si_posteriors, true)?;
    let mut rng = shuffle_rng(cfg.seed);
    let mut order: Vec<usize> = (0..session.seqs.len()).collect();

    let mut snapshots = Vec::with_capacity(cfg.finetune_epochs / cfg.snapshot_every);
    let mut epoch_losses = Vec::with_capacity(cfg.finetune_epochs);
    for epoch in 1..=cfg.finetune_epochs {
        order.shuffle(&mut rng);
        let Some(loss) = run_epoch(&mut session, &mut params, &mut adam, &order, cfg.batch_size, cfg.learning_rate)?
        else {
            let last_good = snapshots.last().map_or_else(|| si.clone(), |s: &Snapshot| s.checkpoint.clone());
            return Err(TrainingError::Diverged { epoch, last_good: Box::new(last_good) });
        };
        epoch_losses.push(loss);
        if epoch % cfg.snapshot_every == 0 {
            let mut snap = params.clone();
            snap.round_to_f32();
            snapshots.push(Snapshot { epoch, checkpoint: Checkpoint { params: snap, seed: cfg.seed } });
        }
    }
    Ok(PersonalizeOutcome { snapshots, epoch_losses })
}
