//! Epoch segmentation, log-spectrogram images, per-night normalization and
//! sequence assembly.

mod cache;
mod normalize;
mod segment;
mod sequences;
mod stft;

use thiserror::Error;

use crate::data_io::{trim_in_bed, DataError, NightRecording};

pub use cache::{read_night, write_night, NIGHT_MAGIC, NIGHT_VERSION};
pub use normalize::{per_night_normalize, NormAxis, NormStats};
pub use segment::{segment_epochs, LabeledEpoch, Segmented};
pub use sequences::{assemble_sequences, covering_sequences, PreparedNight, SequenceSample};
pub use stft::{hamming, stft_epoch, Spectrogram, SpectrogramParams};

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("epoch window has {actual} samples, expected {expected}")]
    WindowLength { expected: usize, actual: usize },
    #[error("recording of {samples} samples is not a whole number of {epoch_len}-sample epochs; trim it first")]
    NotTrimmed { samples: usize, epoch_len: usize },
    #[error("annotation at {onset_sec} s (duration {duration_sec} s) is not aligned to the 30 s grid")]
    AnnotationMisaligned { onset_sec: f64, duration_sec: f64 },
    #[error("annotation at {onset_sec} s overlaps an earlier one")]
    AnnotationOverlap { onset_sec: f64 },
    #[error("need at least {needed} epochs, found {found}")]
    TooFewEpochs { needed: usize, found: usize },
    #[error("image is {}x{}, expected {}x{}", actual.0, actual.1, expected.0, expected.1)]
    ImageShape { expected: (usize, usize), actual: (usize, usize) },
    #[error("frequency bin {bin} has zero standard deviation over the night")]
    ZeroStd { bin: usize },
    #[error("night cache: {0}")]
    Cache(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// An `F × T` log-amplitude image, stored bin-major: `values[f * T + t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochImage {
    bins: usize,
    frames: usize,
    values: Vec<f64>,
}

impl EpochImage {
    pub fn new(bins: usize, frames: usize, values: Vec<f64>) -> Self {
        assert_eq!(bins * frames, values.len(), "image data does not match {bins}x{frames}");
        Self { bins, frames, values }
    }

    pub fn freq_bins(&self) -> usize {
        self.bins
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, f: usize, t: usize) -> f64 {
        self.values[f * self.frames + t]
    }

    pub fn row(&self, f: usize) -> &[f64] {
        &self.values[f * self.frames..(f + 1) * self.frames]
    }

    pub fn row_mut(&mut self, f: usize) -> &mut [f64] {
        &mut self.values[f * self.frames..(f + 1) * self.frames]
    }

    /// Spectral column `t` (length `F`).
    pub fn column(&self, t: usize) -> Vec<f64> {
        (0..self.bins).map(|f| self.get(f, t)).collect()
    }

    /// Keeps the lowest `bins` frequency rows.
    pub fn truncated(&self, bins: usize) -> EpochImage {
        EpochImage::new(bins, self.frames, self.values[..bins * self.frames].to_vec())
    }
}

/// Trim, segment, transform and normalize one night.
pub fn prepare_night(
    rec: &NightRecording,
    spectrogram: &SpectrogramParams,
    norm_axis: NormAxis,
) -> Result<PreparedNight, PreprocessError> {
    if (rec.sample_rate - spectrogram.sample_rate).abs() > 1e-9 {
        return Err(PreprocessError::InvalidParams(format!(
            "recording sampled at {} Hz, spectrogram configured for {} Hz",
            rec.sample_rate, spectrogram.sample_rate
        )));
    }
    let trimmed = trim_in_bed(rec)?;
    let seg = segment_epochs(&trimmed)?;
    let stft = Spectrogram::new(spectrogram.clone())?;
    let images = seg
        .epochs
        .iter()
        .map(|e| stft.epoch_image(&e.samples))
        .collect::<Result<Vec<_>, _>>()?;
    let (images, norm) = per_night_normalize(&images, norm_axis)?;
    Ok(PreparedNight {
        subject_id: rec.subject_id.clone(),
        night_index: rec.night_index,
        images,
        labels: seg.epochs.iter().map(|e| e.stage).collect(),
        norm,
        excluded: seg.excluded,
    })
}
