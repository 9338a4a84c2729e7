use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::session::{SeqRef, Session};
use super::{AdamState, TrainingError};
use crate::evaluation::{compute_metrics, score_night, ConfusionMatrix, FusionMode};
use crate::losses::LossConfig;
use crate::model::{init_params, select_groups, Checkpoint, ModelConfig, ModelParams, Modes, Strategy};
use crate::preprocessing::PreparedNight;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Epochs between the starts of consecutive training sequences.
    pub stride: usize,
    pub lambda: f64,
    /// Sequence stride when scoring validation nights.
    pub eval_stride: usize,
    pub fusion: FusionMode,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            learning_rate: 1e-3,
            batch_size: 8,
            stride: 1,
            lambda: 1e-4,
            eval_stride: 1,
            fusion: FusionMode::Geometric,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<(), TrainingError> {
        positive(&[
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("stride", self.stride),
            ("eval_stride", self.eval_stride),
        ])?;
        rate("learning_rate", self.learning_rate)?;
        LossConfig { lambda: self.lambda, alpha: 0.0 }.validate()?;
        Ok(())
    }
}

pub(super) fn positive(values: &[(&str, usize)]) -> Result<(), TrainingError> {
    match values.iter().find(|(_, v)| *v == 0) {
        Some((name, _)) => Err(TrainingError::InvalidConfig(format!("{name} must be positive"))),
        None => Ok(()),
    }
}

pub(super) fn rate(name: &str, value: f64) -> Result<(), TrainingError> {
    if value.is_finite() && value > 0.0 {
        Ok(())
    } else {
        Err(TrainingError::InvalidConfig(format!("{name} must be a positive number, got {value}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean batch loss over the epoch.
    pub train_loss: f64,
    /// Overall accuracy on the validation nights, when there are any.
    pub valid_acc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    /// The retained model: best validation accuracy, or the last epoch
    /// without validation nights.
    pub checkpoint: Checkpoint,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

/// Start of every training sequence of `nights`, `stride` epochs apart.
pub(super) fn sequence_grid(nights: &[PreparedNight], seq_len: usize, stride: usize) -> Vec<SeqRef> {
    let mut seqs = Vec::new();
    for (night, n) in nights.iter().enumerate() {
        if n.len() < seq_len {
            continue;
        }
        seqs.extend((0..=n.len() - seq_len).step_by(stride).map(|start| SeqRef { night, start }));
    }
    seqs
}

pub(super) fn shuffle_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

/// One pass over `order` in minibatches. Returns the mean batch loss, or
/// `None` if a batch diverged.
pub(super) fn run_epoch(
    session: &mut Session<'_>,
    params: &mut ModelParams,
    adam: &mut AdamState,
    order: &[usize],
    batch_size: usize,
    lr: f64,
) -> Result<Option<f64>, TrainingError> {
    let mut total = 0.0;
    let mut count = 0;
    for batch in order.chunks(batch_size) {
        match session.step(params, adam, batch, lr)? {
            Some(loss) => total += loss,
            None => return Ok(None),
        }
        count += 1;
    }
    Ok(Some(total / count as f64))
}

fn rounded(params: &ModelParams, seed: u64) -> Checkpoint {
    let mut params = params.clone();
    params.round_to_f32();
    Checkpoint { params, seed }
}

/// Overall accuracy over all epochs of `nights`.
pub fn validation_accuracy(
    params: &ModelParams,
    nights: &[PreparedNight],
    stride: usize,
    fusion: FusionMode,
) -> Result<f64, TrainingError> {
    let mut cm = ConfusionMatrix::new();
    for night in nights {
        cm.merge(&score_night(params, night, stride, fusion)?.confusion);
    }
    Ok(compute_metrics(&cm)?.accuracy)
}

/// Trains the subject-independent model from scratch on `train`, keeping
/// the epoch with the best overall accuracy on `valid`.
pub fn pretrain(
    train: &[PreparedNight],
    valid: &[PreparedNight],
    model: &ModelConfig,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<PretrainOutcome, TrainingError> {
    cfg.validate()?;
    model.validate()?;
    let mut params = init_params(model, seed)?;
    let seqs = sequence_grid(train, model.seq_len, cfg.stride);
    if seqs.is_empty() {
        return Err(TrainingError::EmptyTrainingSet(format!(
            "{} training nights yield no sequence of {} epochs",
            train.len(),
            model.seq_len
        )));
    }
    let (trainable, _) = select_groups(&params, Strategy::All);
    let mut adam = AdamState::new(&params, &trainable)?;
    let loss = LossConfig { lambda: cfg.lambda, alpha: 0.0 };
    let mut session = Session::new(&params, train, seqs, &trainable, Modes::TRAIN, loss, None, false)?;
    let mut rng = shuffle_rng(seed);
    let mut order: Vec<usize> = (0..session.seqs.len()).collect();

    let mut best = rounded(&params, seed);
    let mut best_epoch = 0;
    let mut best_acc = f64::NEG_INFINITY;
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let Some(train_loss) = run_epoch(&mut session, &mut params, &mut adam, &order, cfg.batch_size, cfg.learning_rate)?
        else {
            return Err(TrainingError::Diverged { epoch, last_good: Box::new(best) });
        };
        let valid_acc = if valid.is_empty() {
            None
        } else {
            Some(validation_accuracy(&params, valid, cfg.eval_stride, cfg.fusion)?)
        };
        let improved = valid_acc.map_or(true, |acc| acc > best_acc);
        if improved {
            best = rounded(&params, seed);
            best_epoch = epoch;
            best_acc = valid_acc.unwrap_or(best_acc);
        }
        log.push(EpochLog { epoch, train_loss, valid_acc });
    }
    Ok(PretrainOutcome { checkpoint: best, best_epoch, log })
}
