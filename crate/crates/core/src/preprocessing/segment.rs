use crate::data_io::{NightRecording, RawStage, SleepStage, EPOCH_SEC};

use super::PreprocessError;

/// A 30 s window of raw signal with its (mapped) stage.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledEpoch {
    /// Position of the epoch in the trimmed night, before exclusions.
    pub index: usize,
    pub samples: Vec<f64>,
    pub stage: SleepStage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segmented {
    pub epochs: Vec<LabeledEpoch>,
    /// Epochs dropped because they were movement, unknown or unannotated.
    pub excluded: usize,
}

fn on_grid(sec: f64) -> Option<usize> {
    let k = sec / EPOCH_SEC;
    ((k - k.round()).abs() < 1e-6 && k >= -1e-6).then(|| k.round() as usize)
}

/// Cuts a trimmed night into 30 s epochs and drops excluded ones. The
/// remaining epochs are spliced together, so neighbours in the output may
/// have been separated by removed epochs in the recording.
pub fn segment_epochs(rec: &NightRecording) -> Result<Segmented, PreprocessError> {
    let epoch_len = (rec.sample_rate * EPOCH_SEC).round() as usize;
    if epoch_len == 0 || rec.signal.len() % epoch_len != 0 {
        return Err(PreprocessError::NotTrimmed {
            samples: rec.signal.len(),
            epoch_len,
        });
    }
    let n = rec.signal.len() / epoch_len;
    let mut labels: Vec<Option<Option<SleepStage>>> = vec![None; n];
    for a in &rec.annotations {
        let (Some(first), Some(count)) = (on_grid(a.onset_sec), on_grid(a.duration_sec)) else {
            return Err(PreprocessError::AnnotationMisaligned {
                onset_sec: a.onset_sec,
                duration_sec: a.duration_sec,
            });
        };
        let stage = a.label.parse::<RawStage>()?.to_stage();
        for slot in labels.iter_mut().skip(first).take(count) {
            if slot.is_some() {
                return Err(PreprocessError::AnnotationOverlap { onset_sec: a.onset_sec });
            }
            *slot = Some(stage);
        }
    }
    let mut epochs = Vec::with_capacity(n);
    for (i, label) in labels.into_iter().enumerate() {
        if let Some(Some(stage)) = label {
            epochs.push(LabeledEpoch {
                index: i,
                samples: rec.signal[i * epoch_len..(i + 1) * epoch_len].to_vec(),
                stage,
            });
        }
    }
    Ok(Segmented { excluded: n - epochs.len(), epochs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_io::Annotation;

    fn rec(epochs: usize, annotations: Vec<Annotation>) -> NightRecording {
        NightRecording {
            subject_id: "s".into(),
            night_index: 1,
            signal: vec![0.0; epochs * 3000],
            sample_rate: 100.0,
            annotations,
            lights_off: 0.0,
            lights_on: epochs as f64 * 30.0,
        }
    }

    fn ann(onset: f64, duration: f64, label: &str) -> Annotation {
        Annotation { onset_sec: onset, duration_sec: duration, label: label.into() }
    }

    #[test]
    fn movement_epochs_are_spliced_out() {
        let r = rec(
            840,
            vec![ann(0.0, 3000.0, "N2"), ann(3000.0, 90.0, "MOVEMENT"), ann(3090.0, 22110.0, "REM")],
        );
        let s = segment_epochs(&r).unwrap();
        assert_eq!(s.epochs.len(), 837);
        assert_eq!(s.excluded, 3);
        assert_eq!(s.epochs[100].index, 103);
        assert!(s.epochs.iter().all(|e| e.samples.len() == 3000));
    }

    #[test]
    fn count_preserved_without_exclusions() {
        let s = segment_epochs(&rec(40, vec![ann(0.0, 1200.0, "W")])).unwrap();
        assert_eq!(s.epochs.len(), 40);
    }

    #[test]
    fn off_grid_annotation_is_an_error() {
        let err = segment_epochs(&rec(4, vec![ann(15.0, 30.0, "W")])).unwrap_err();
        assert!(matches!(err, PreprocessError::AnnotationMisaligned { .. }));
    }
}
