use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::DataError;

/// Length of one scored epoch.
pub const EPOCH_SEC: f64 = 30.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub onset_sec: f64,
    pub duration_sec: f64,
    pub label: String,
}

/// One subject-night of single-channel EEG with its hypnogram.
#[derive(Debug, Clone, PartialEq)]
pub struct NightRecording {
    pub subject_id: String,
    /// 1-based.
    pub night_index: u32,
    /// Samples in µV.
    pub signal: Vec<f64>,
    pub sample_rate: f64,
    pub annotations: Vec<Annotation>,
    pub lights_off: f64,
    pub lights_on: f64,
}

impl NightRecording {
    pub fn duration_sec(&self) -> f64 {
        self.signal.len() as f64 / self.sample_rate
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if !(self.sample_rate > 0.0) {
            return Err(DataError::InvalidRecording(format!("sample rate {}", self.sample_rate)));
        }
        if !(self.lights_off < self.lights_on) || self.lights_off < 0.0 {
            return Err(DataError::InvalidRecording(format!(
                "lights window [{}, {}) is empty",
                self.lights_off, self.lights_on
            )));
        }
        if self.lights_on > self.duration_sec() + 1e-9 {
            return Err(DataError::InvalidRecording(format!(
                "lights on at {} s after end of signal ({} s)",
                self.lights_on,
                self.duration_sec()
            )));
        }
        Ok(())
    }
}

/// Crops signal and annotations to the in-bed window `[lights_off, lights_on)`
/// and re-bases time so the window starts at zero. A trailing partial epoch
/// is dropped.
pub fn trim_in_bed(rec: &NightRecording) -> Result<NightRecording, DataError> {
    rec.validate()?;
    let whole_epochs = ((rec.lights_on - rec.lights_off) / EPOCH_SEC + 1e-9).floor();
    if whole_epochs < 1.0 {
        return Err(DataError::EmptyWindow {
            lights_off: rec.lights_off,
            lights_on: rec.lights_on,
        });
    }
    let window = whole_epochs * EPOCH_SEC;
    let start = (rec.lights_off * rec.sample_rate).round() as usize;
    let len = (window * rec.sample_rate).round() as usize;
    let signal = rec.signal[start..start + len].to_vec();

    let end = rec.lights_off + window;
    let annotations = rec
        .annotations
        .iter()
        .filter_map(|a| {
            let a_start = a.onset_sec.max(rec.lights_off);
            let a_end = (a.onset_sec + a.duration_sec).min(end);
            (a_end > a_start).then(|| Annotation {
                onset_sec: a_start - rec.lights_off,
                duration_sec: a_end - a_start,
                label: a.label.clone(),
            })
        })
        .collect();

    Ok(NightRecording {
        subject_id: rec.subject_id.clone(),
        night_index: rec.night_index,
        signal,
        sample_rate: rec.sample_rate,
        annotations,
        lights_off: 0.0,
        lights_on: window,
    })
}

/// Reads a `onset_sec,duration_sec,label` sidecar file. The header row is
/// mandatory.
pub fn read_annotations_csv<R: Read>(reader: R) -> Result<Vec<Annotation>, DataError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| DataError::Csv(e.to_string()))?.clone();
    let expected = ["onset_sec", "duration_sec", "label"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(DataError::Csv(format!(
            "expected header `onset_sec,duration_sec,label`, found `{}`",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    rdr.deserialize()
        .map(|r| r.map_err(|e| DataError::Csv(e.to_string())))
        .collect()
}

pub fn write_annotations_csv<W: Write>(writer: W, annotations: &[Annotation]) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(writer);
    for a in annotations {
        w.serialize(a).map_err(|e| DataError::Csv(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
