//! End-to-end personalization study on a synthetic cohort: pretrain the
//! subject-independent model, personalize it on the first night of every
//! target subject for each (α, strategy) pair and score every snapshot on
//! the second night.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data_io::{generate_synthetic_cohort, CohortSpec, NightRecording, SubjectVariation};
use crate::evaluation::{score_night, FusionMode, ReportRow, SI_STRATEGY};
use crate::model::{Checkpoint, ModelConfig, Strategy};
use crate::preprocessing::{prepare_night, NormAxis, PreparedNight, PreprocessError, SpectrogramParams};
use crate::training::{personalize, pretrain, EpochLog, FinetuneConfig, PretrainConfig, TrainingError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudyConfig {
    /// Subjects used to pretrain the subject-independent model.
    pub source: CohortSpec,
    /// Source subjects held out for validation during pretraining.
    pub valid_subjects: usize,
    /// Target subjects; night 1 personalizes, night 2 tests.
    pub target: CohortSpec,
    pub spectrogram: SpectrogramParams,
    pub norm_axis: NormAxis,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    /// Template for every personalization run; strategy and α come from
    /// the grids below.
    pub finetune: FinetuneConfig,
    pub alphas: Vec<f64>,
    pub strategies: Vec<Strategy>,
    /// Extra (strategy, α) runs on top of the full grid.
    pub extra_runs: Vec<(Strategy, f64)>,
    pub eval_stride: usize,
    pub fusion: FusionMode,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            source: CohortSpec { subjects: 8, ..CohortSpec::default() },
            valid_subjects: 1,
            target: CohortSpec { subjects: 4, subject_prefix: "tgt".into(), ..CohortSpec::default() },
            spectrogram: SpectrogramParams::default(),
            norm_axis: NormAxis::PerBin,
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            alphas: vec![0.0, 0.2, 0.4, 0.6, 0.8],
            strategies: vec![Strategy::All],
            extra_runs: Vec::new(),
            eval_stride: 1,
            fusion: FusionMode::Geometric,
        }
    }
}

impl StudyConfig {
    /// Desk-scale configuration for the synthetic trend experiments: a
    /// small network, short nights and target subjects whose spectra are
    /// shifted well beyond the source population.
    pub fn desk_scale() -> Self {
        let seq_len = 10;
        let source = CohortSpec {
            subjects: 8,
            epochs_per_night: 120,
            seq_len,
            subject_variation: SubjectVariation { freq_shift_sd_hz: 0.6, freq_shift_floor_hz: 0.0, gain_log_sd: 0.3, peak_gain_log_sd: 0.15 },
            label_noise: 0.15,
            ..CohortSpec::default()
        };
        let target = CohortSpec {
            subjects: 4,
            subject_prefix: "tgt".into(),
            epochs_per_night: 200,
            subject_variation: SubjectVariation { freq_shift_sd_hz: 1.0, freq_shift_floor_hz: 2.0, gain_log_sd: 0.5, peak_gain_log_sd: 0.5 },
            label_noise: 0.1,
            ..source.clone()
        };
        Self {
            source,
            valid_subjects: 1,
            target,
            model: ModelConfig {
                filters: 16,
                epb_hidden: 8,
                attention_size: 8,
                spb_hidden: 8,
                seq_len,
                ..ModelConfig::default()
            },
            pretrain: PretrainConfig { epochs: 10, learning_rate: 3e-3, batch_size: 8, stride: 5, ..PretrainConfig::default() },
            finetune: FinetuneConfig { learning_rate: 1e-3, stride: 2, ..FinetuneConfig::default() },
            alphas: vec![0.0, 0.4],
            strategies: vec![Strategy::All],
            extra_runs: vec![(Strategy::Softmax, 0.4)],
            eval_stride: 2,
            ..Self::default()
        }
    }

    /// Every (strategy, α) pair to run, in report order.
    pub fn runs(&self) -> Vec<(Strategy, f64)> {
        let mut runs: Vec<(Strategy, f64)> =
            self.strategies.iter().flat_map(|&s| self.alphas.iter().map(move |&a| (s, a))).collect();
        for r in &self.extra_runs {
            if !runs.contains(r) {
                runs.push(*r);
            }
        }
        runs
    }
}

#[derive(Debug, Clone)]
pub struct StudyOutcome {
    pub si: Checkpoint,
    pub pretrain_log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub rows: Vec<ReportRow>,
}

pub fn prepare_all(
    recordings: &[NightRecording],
    spectrogram: &SpectrogramParams,
    axis: NormAxis,
) -> Result<Vec<PreparedNight>, PreprocessError> {
    recordings.iter().map(|r| prepare_night(r, spectrogram, axis)).collect()
}

/// Scores the SI model on both nights of a subject and every snapshot of
/// every run on the second night.
pub fn personalize_subject(
    si: &Checkpoint,
    night1: &PreparedNight,
    night2: &PreparedNight,
    runs: &[(Strategy, f64)],
    finetune: &FinetuneConfig,
    eval_stride: usize,
    fusion: FusionMode,
) -> Result<Vec<ReportRow>, TrainingError> {
    let subject = &night2.subject_id;
    let mut rows = Vec::new();
    for night in [night1, night2] {
        let score = score_night(&si.params, night, eval_stride, fusion)?;
        rows.push(ReportRow::new(subject, night.night_index, None, SI_STRATEGY, 0, &score.metrics));
    }
    for &(strategy, alpha) in runs {
        let cfg = FinetuneConfig { strategy, alpha, ..finetune.clone() };
        let out = personalize(si, night1, &cfg)?;
        for snap in &out.snapshots {
            let score = score_night(&snap.checkpoint.params, night2, eval_stride, fusion)?;
            rows.push(ReportRow::new(subject, night2.night_index, Some(alpha), strategy.name(), snap.epoch, &score.metrics));
        }
    }
    Ok(rows)
}

/// Runs the whole study for one seed. Target subjects are processed on up
/// to `workers` threads; the rows come out in subject order regardless.
pub fn run_study(cfg: &StudyConfig, seed: u64, workers: usize) -> Result<StudyOutcome, TrainingError> {
    let source = generate_synthetic_cohort(&cfg.source, seed).map_err(PreprocessError::from)?;
    let target_spec = CohortSpec { first_subject: cfg.source.first_subject + cfg.source.subjects, ..cfg.target.clone() };
    let target = generate_synthetic_cohort(&target_spec, seed).map_err(PreprocessError::from)?;
    let source = prepare_all(&source, &cfg.spectrogram, cfg.norm_axis)?;
    let target = prepare_all(&target, &cfg.spectrogram, cfg.norm_axis)?;

    let per_subject = cfg.source.nights_per_subject;
    let n_valid = cfg.valid_subjects.min(cfg.source.subjects.saturating_sub(1)) * per_subject;
    let (train, valid) = source.split_at(source.len() - n_valid);
    let pre = pretrain(train, valid, &cfg.model, &cfg.pretrain, seed)?;

    let runs = cfg.runs();
    let finetune = FinetuneConfig { seed, ..cfg.finetune.clone() };
    let subjects: Vec<(&PreparedNight, &PreparedNight)> =
        target.chunks(cfg.target.nights_per_subject).map(|nights| (&nights[0], &nights[1])).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| TrainingError::InvalidConfig(e.to_string()))?;
    let per_subject_rows: Vec<Vec<ReportRow>> = pool.install(|| {
        subjects
            .par_iter()
            .map(|(n1, n2)| personalize_subject(&pre.checkpoint, n1, n2, &runs, &finetune, cfg.eval_stride, cfg.fusion))
            .collect::<Result<_, _>>()
    })?;
    Ok(StudyOutcome {
        si: pre.checkpoint,
        pretrain_log: pre.log,
        best_epoch: pre.best_epoch,
        rows: per_subject_rows.into_iter().flatten().collect(),
    })
}
