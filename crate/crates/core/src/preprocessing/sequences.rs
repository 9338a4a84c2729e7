use crate::data_io::SleepStage;

use super::{NormStats, PreprocessError, EpochImage};

/// A fully preprocessed night: normalized images and labels of the retained
/// epochs, in order.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedNight {
    pub subject_id: String,
    pub night_index: u32,
    pub images: Vec<EpochImage>,
    pub labels: Vec<SleepStage>,
    pub norm: NormStats,
    /// Epochs removed before splicing.
    pub excluded: usize,
}

impl PreparedNight {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn freq_bins(&self) -> usize {
        self.images.first().map_or(0, EpochImage::freq_bins)
    }

    pub fn frames(&self) -> usize {
        self.images.first().map_or(0, EpochImage::frames)
    }
}

/// `len` consecutive epochs of one night, borrowed.
#[derive(Debug, Clone, Copy)]
pub struct SequenceSample<'a> {
    pub night: &'a PreparedNight,
    pub start: usize,
    pub len: usize,
}

impl<'a> SequenceSample<'a> {
    pub fn images(&self) -> &'a [EpochImage] {
        &self.night.images[self.start..self.start + self.len]
    }

    pub fn labels(&self) -> &'a [SleepStage] {
        &self.night.labels[self.start..self.start + self.len]
    }

    pub fn one_hot_labels(&self) -> Vec<[f64; 5]> {
        self.labels().iter().map(|s| s.one_hot()).collect()
    }

    /// `(subject, night, first epoch)`.
    pub fn origin(&self) -> (&'a str, u32, usize) {
        (&self.night.subject_id, self.night.night_index, self.start)
    }
}

/// Windows starting at `0, stride, 2*stride, ...` while a full window fits.
pub fn assemble_sequences(
    night: &PreparedNight,
    seq_len: usize,
    stride: usize,
) -> Result<Vec<SequenceSample<'_>>, PreprocessError> {
    if seq_len == 0 || stride == 0 {
        return Err(PreprocessError::InvalidParams(format!("sequence length {seq_len}, stride {stride}")));
    }
    if night.len() < seq_len {
        return Err(PreprocessError::TooFewEpochs { needed: seq_len, found: night.len() });
    }
    Ok((0..=night.len() - seq_len)
        .step_by(stride)
        .map(|start| SequenceSample { night, start, len: seq_len })
        .collect())
}

/// Like [`assemble_sequences`] but appends a final window ending at the last
/// epoch when the stride leaves a tail uncovered.
pub fn covering_sequences(
    night: &PreparedNight,
    seq_len: usize,
    stride: usize,
) -> Result<Vec<SequenceSample<'_>>, PreprocessError> {
    let mut seqs = assemble_sequences(night, seq_len, stride)?;
    let last = night.len() - seq_len;
    if seqs.last().map(|s| s.start) != Some(last) {
        seqs.push(SequenceSample { night, start: last, len: seq_len });
    }
    Ok(seqs)
}
