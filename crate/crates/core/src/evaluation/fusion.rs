use serde::{Deserialize, Serialize};

use super::{compute_metrics, ConfusionMatrix, EvalError, MetricsReport};
use crate::data_io::{SleepStage, NUM_STAGES};
use crate::model::{argmax_stage, forward_batch, ModelParams, PosteriorSequence};
use crate::preprocessing::{covering_sequences, EpochImage, PreparedNight};

/// How posteriors of overlapping sequences are combined per epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Average log-probabilities (geometric mean), then renormalize.
    #[default]
    Geometric,
    /// Keep the posterior from the latest-starting sequence.
    LastWins,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedEpoch {
    pub probs: [f64; NUM_STAGES],
    pub stage: SleepStage,
}

/// Fuses sequence posteriors (each with the index of its first epoch) into
/// one posterior and predicted stage per epoch of a night of `night_len`
/// epochs. Ties in the prediction go to the earlier stage.
pub fn aggregate_epoch_posteriors(
    sequences: &[(usize, &PosteriorSequence)],
    night_len: usize,
    mode: FusionMode,
) -> Result<Vec<FusedEpoch>, EvalError> {
    let mut log_sum = vec![[0.0f64; NUM_STAGES]; night_len];
    let mut last: Vec<Option<(usize, [f64; NUM_STAGES])>> = vec![None; night_len];
    let mut count = vec![0usize; night_len];
    for &(start, post) in sequences {
        if start + post.len() > night_len {
            return Err(EvalError::Mismatch(format!(
                "sequence at {start} of length {} overruns a night of {night_len} epochs",
                post.len()
            )));
        }
        for (l, row) in post.probs.iter().enumerate() {
            let e = start + l;
            count[e] += 1;
            for c in 0..NUM_STAGES {
                log_sum[e][c] += row[c].max(f64::MIN_POSITIVE).ln();
            }
            if last[e].map_or(true, |(s, _)| start >= s) {
                last[e] = Some((start, *row));
            }
        }
    }
    if let Some(epoch) = count.iter().position(|&c| c == 0) {
        return Err(EvalError::Uncovered { epoch });
    }
    Ok((0..night_len)
        .map(|e| {
            let probs = match mode {
                FusionMode::Geometric => {
                    let mean = log_sum[e].map(|v| v / count[e] as f64);
                    let max = mean.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut p = mean.map(|v| (v - max).exp());
                    let z: f64 = p.iter().sum();
                    p.iter_mut().for_each(|v| *v /= z);
                    p
                }
                FusionMode::LastWins => last[e].expect("covered").1,
            };
            FusedEpoch { probs, stage: argmax_stage(&probs) }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct NightScore {
    pub confusion: ConfusionMatrix,
    pub metrics: MetricsReport,
    pub predictions: Vec<SleepStage>,
}

/// Scores a model on a whole night: posteriors of sequences starting every
/// `stride` epochs (plus one ending at the last epoch), fused per epoch.
pub fn score_night(
    params: &ModelParams,
    night: &PreparedNight,
    stride: usize,
    mode: FusionMode,
) -> Result<NightScore, EvalError> {
    let seqs = covering_sequences(night, params.config.seq_len, stride)?;
    let images: Vec<&[EpochImage]> = seqs.iter().map(|s| s.images()).collect();
    let posts = forward_batch(params, &images)?;
    let with_start: Vec<(usize, &PosteriorSequence)> = seqs.iter().map(|s| s.start).zip(&posts).collect();
    let fused = aggregate_epoch_posteriors(&with_start, night.len(), mode)?;
    let predictions: Vec<SleepStage> = fused.iter().map(|f| f.stage).collect();
    let confusion = ConfusionMatrix::from_pairs(&night.labels, &predictions)?;
    Ok(NightScore { metrics: compute_metrics(&confusion)?, confusion, predictions })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn post(rows: &[[f64; 5]]) -> PosteriorSequence {
        PosteriorSequence { probs: rows.to_vec() }
    }

    #[test]
    fn geometric_fusion_cases() {
        let a = post(&[[0.8, 0.2, 0.0, 0.0, 0.0]]);
        let b = post(&[[0.2, 0.8, 0.0, 0.0, 0.0]]);
        let fused = aggregate_epoch_posteriors(&[(0, &a), (0, &b)], 1, FusionMode::Geometric).unwrap();
        assert!((fused[0].probs[0] - 0.5).abs() < 1e-12 && (fused[0].probs[1] - 0.5).abs() < 1e-12);
        assert_eq!(fused[0].stage, SleepStage::W);

        let p = post(&[[0.1, 0.2, 0.3, 0.25, 0.15]]);
        let single = aggregate_epoch_posteriors(&[(0, &p)], 1, FusionMode::Geometric).unwrap();
        let twice = aggregate_epoch_posteriors(&[(0, &p), (0, &p)], 1, FusionMode::Geometric).unwrap();
        for c in 0..5 {
            assert!((single[0].probs[c] - p.probs[0][c]).abs() < 1e-12);
            assert!((twice[0].probs[c] - p.probs[0][c]).abs() < 1e-12);
        }
    }

    #[test]
    fn last_wins_and_coverage() {
        let a = post(&[[0.9, 0.1, 0.0, 0.0, 0.0], [0.9, 0.1, 0.0, 0.0, 0.0]]);
        let b = post(&[[0.1, 0.9, 0.0, 0.0, 0.0], [0.1, 0.9, 0.0, 0.0, 0.0]]);
        let fused = aggregate_epoch_posteriors(&[(1, &b), (0, &a)], 3, FusionMode::LastWins).unwrap();
        let stages: Vec<_> = fused.iter().map(|f| f.stage).collect();
        assert_eq!(stages, [SleepStage::W, SleepStage::N1, SleepStage::N1]);
        assert!(matches!(
            aggregate_epoch_posteriors(&[(0, &a)], 3, FusionMode::Geometric),
            Err(EvalError::Uncovered { epoch: 2 })
        ));
    }
}
