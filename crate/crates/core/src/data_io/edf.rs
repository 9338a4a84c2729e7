//! European Data Format reader and writer.
//!
//! Supports what single-channel sleep staging needs: the 256-byte main
//! header, one 256-byte header block per signal, 16-bit little-endian
//! samples, and the EDF+ `EDF Annotations` signal carrying time-stamped
//! annotation lists.

use thiserror::Error;

use super::recording::{Annotation, NightRecording};

const MAIN_HEADER: usize = 256;
const SIGNAL_HEADER: usize = 256;
pub const ANNOTATIONS_LABEL: &str = "EDF Annotations";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EdfError {
    #[error("malformed EDF header at byte {offset} ({field}): {reason}")]
    Malformed { offset: usize, field: &'static str, reason: String },
    #[error("EDF data section truncated: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("channel `{requested}` not found; available: {}", available.join(", "))]
    ChannelNotFound { requested: String, available: Vec<String> },
    #[error("invalid EDF signal: {0}")]
    InvalidSignal(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SignalHeader {
    pub label: String,
    pub transducer: String,
    pub physical_dimension: String,
    pub physical_min: f64,
    pub physical_max: f64,
    pub digital_min: i32,
    pub digital_max: i32,
    pub prefiltering: String,
    pub samples_per_record: usize,
}

impl SignalHeader {
    pub fn is_annotations(&self) -> bool {
        self.label.trim() == ANNOTATIONS_LABEL
    }

    /// `(d - dmin) * (pmax - pmin) / (dmax - dmin) + pmin`
    pub fn to_physical(&self, digital: i16) -> f64 {
        let span_d = (self.digital_max - self.digital_min) as f64;
        let span_p = self.physical_max - self.physical_min;
        (digital as f64 - self.digital_min as f64) * span_p / span_d + self.physical_min
    }

    pub fn to_digital(&self, physical: f64) -> i16 {
        let span_d = (self.digital_max - self.digital_min) as f64;
        let span_p = self.physical_max - self.physical_min;
        let d = ((physical - self.physical_min) * span_d / span_p + self.digital_min as f64).round();
        d.clamp(self.digital_min as f64, self.digital_max as f64) as i16
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdfHeader {
    pub patient: String,
    pub recording: String,
    pub start_date: String,
    pub start_time: String,
    /// `EDF+C` / `EDF+D` for EDF+, blank for plain EDF.
    pub reserved: String,
    pub num_records: usize,
    pub record_duration: f64,
    pub signals: Vec<SignalHeader>,
}

/// A parsed file: header plus the raw digital samples of every signal.
#[derive(Debug, Clone, PartialEq)]
pub struct EdfFile {
    pub header: EdfHeader,
    pub samples: Vec<Vec<i16>>,
}

/// One extracted signal in both digital and physical units.
#[derive(Debug, Clone, PartialEq)]
pub struct Channel {
    pub header: SignalHeader,
    pub sample_rate: f64,
    pub digital: Vec<i16>,
    pub physical: Vec<f64>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn field(&mut self, len: usize, name: &'static str) -> Result<&'a str, EdfError> {
        let end = self.pos + len;
        let raw = self.bytes.get(self.pos..end).ok_or(EdfError::Malformed {
            offset: self.pos,
            field: name,
            reason: format!("header ends at byte {}", self.bytes.len()),
        })?;
        let text = std::str::from_utf8(raw).map_err(|_| EdfError::Malformed {
            offset: self.pos,
            field: name,
            reason: "non-ASCII bytes".into(),
        })?;
        self.pos = end;
        Ok(text.trim())
    }

    fn number<T: std::str::FromStr>(&mut self, len: usize, name: &'static str) -> Result<T, EdfError> {
        let offset = self.pos;
        let text = self.field(len, name)?;
        text.parse().map_err(|_| EdfError::Malformed {
            offset,
            field: name,
            reason: format!("`{text}` is not a number"),
        })
    }
}

impl EdfFile {
    pub fn parse(bytes: &[u8]) -> Result<Self, EdfError> {
        let mut c = Cursor { bytes, pos: 0 };
        let version = c.field(8, "version")?;
        if version != "0" {
            return Err(EdfError::Malformed {
                offset: 0,
                field: "version",
                reason: format!("expected `0`, found `{version}`"),
            });
        }
        let patient = c.field(80, "patient")?.to_string();
        let recording = c.field(80, "recording")?.to_string();
        let start_date = c.field(8, "start date")?.to_string();
        let start_time = c.field(8, "start time")?.to_string();
        let header_bytes_offset = c.pos;
        let header_bytes: usize = c.number(8, "header bytes")?;
        let reserved = c.field(44, "reserved")?.to_string();
        let records_offset = c.pos;
        let declared_records: i64 = c.number(8, "number of records")?;
        let duration_offset = c.pos;
        let record_duration: f64 = c.number(8, "record duration")?;
        let ns_offset = c.pos;
        let ns: usize = c.number(4, "number of signals")?;
        if ns == 0 {
            return Err(EdfError::Malformed { offset: ns_offset, field: "number of signals", reason: "zero".into() });
        }
        if !(record_duration > 0.0) {
            return Err(EdfError::Malformed {
                offset: duration_offset,
                field: "record duration",
                reason: format!("{record_duration} is not positive"),
            });
        }
        if header_bytes != MAIN_HEADER + ns * SIGNAL_HEADER {
            return Err(EdfError::Malformed {
                offset: header_bytes_offset,
                field: "header bytes",
                reason: format!("{header_bytes} does not match {ns} signals"),
            });
        }

        let mut cols: Vec<Vec<String>> = Vec::new();
        for (width, name) in [
            (16, "label"),
            (80, "transducer"),
            (8, "physical dimension"),
            (8, "physical minimum"),
            (8, "physical maximum"),
            (8, "digital minimum"),
            (8, "digital maximum"),
            (80, "prefiltering"),
            (8, "samples per record"),
            (32, "signal reserved"),
        ] {
            let mut col = Vec::with_capacity(ns);
            for _ in 0..ns {
                col.push(c.field(width, name)?.to_string());
            }
            cols.push(col);
        }
        // Offsets of each per-signal field block, for error reporting.
        let block = |field: usize, i: usize| -> usize {
            let widths = [16, 80, 8, 8, 8, 8, 8, 80, 8, 32];
            MAIN_HEADER + widths[..field].iter().sum::<usize>() * ns + widths[field] * i
        };
        let parse_at = |field: usize, i: usize, name: &'static str| -> Result<f64, EdfError> {
            cols[field][i].parse::<f64>().map_err(|_| EdfError::Malformed {
                offset: block(field, i),
                field: name,
                reason: format!("`{}` is not a number", cols[field][i]),
            })
        };

        let mut signals = Vec::with_capacity(ns);
        for i in 0..ns {
            let sig = SignalHeader {
                label: cols[0][i].clone(),
                transducer: cols[1][i].clone(),
                physical_dimension: cols[2][i].clone(),
                physical_min: parse_at(3, i, "physical minimum")?,
                physical_max: parse_at(4, i, "physical maximum")?,
                digital_min: parse_at(5, i, "digital minimum")? as i32,
                digital_max: parse_at(6, i, "digital maximum")? as i32,
                prefiltering: cols[7][i].clone(),
                samples_per_record: parse_at(8, i, "samples per record")? as usize,
            };
            if sig.digital_max <= sig.digital_min {
                return Err(EdfError::Malformed {
                    offset: block(5, i),
                    field: "digital range",
                    reason: format!("[{}, {}] is empty", sig.digital_min, sig.digital_max),
                });
            }
            if sig.physical_max == sig.physical_min {
                return Err(EdfError::Malformed {
                    offset: block(3, i),
                    field: "physical range",
                    reason: "physical minimum equals maximum".into(),
                });
            }
            signals.push(sig);
        }

        let record_samples: usize = signals.iter().map(|s| s.samples_per_record).sum();
        let record_bytes = record_samples * 2;
        let data = &bytes[header_bytes.min(bytes.len())..];
        let num_records = if declared_records < 0 {
            data.len() / record_bytes
        } else {
            declared_records as usize
        };
        if declared_records < -1 {
            return Err(EdfError::Malformed {
                offset: records_offset,
                field: "number of records",
                reason: format!("{declared_records}"),
            });
        }
        let expected = num_records * record_bytes;
        if data.len() < expected {
            return Err(EdfError::Truncated { expected, actual: data.len() });
        }

        let mut samples: Vec<Vec<i16>> =
            signals.iter().map(|s| Vec::with_capacity(s.samples_per_record * num_records)).collect();
        let mut pos = 0;
        for _ in 0..num_records {
            for (sig, out) in signals.iter().zip(samples.iter_mut()) {
                for _ in 0..sig.samples_per_record {
                    out.push(i16::from_le_bytes([data[pos], data[pos + 1]]));
                    pos += 2;
                }
            }
        }

        Ok(EdfFile {
            header: EdfHeader {
                patient,
                recording,
                start_date,
                start_time,
                reserved,
                num_records,
                record_duration,
                signals,
            },
            samples,
        })
    }

    pub fn labels(&self) -> Vec<String> {
        self.header.signals.iter().map(|s| s.label.clone()).collect()
    }

    /// Extracts the signal whose label matches `label` (case-insensitive,
    /// surrounding whitespace ignored).
    pub fn channel(&self, label: &str) -> Result<Channel, EdfError> {
        let idx = self
            .header
            .signals
            .iter()
            .position(|s| !s.is_annotations() && s.label.trim().eq_ignore_ascii_case(label.trim()))
            .ok_or_else(|| EdfError::ChannelNotFound {
                requested: label.to_string(),
                available: self.labels(),
            })?;
        let header = self.header.signals[idx].clone();
        let digital = self.samples[idx].clone();
        let physical = digital.iter().map(|&d| header.to_physical(d)).collect();
        Ok(Channel {
            sample_rate: header.samples_per_record as f64 / self.header.record_duration,
            header,
            digital,
            physical,
        })
    }

    /// Annotations from every `EDF Annotations` signal, in file order.
    /// Time-keeping entries with empty text are skipped.
    pub fn annotations(&self) -> Result<Vec<Annotation>, EdfError> {
        let mut out = Vec::new();
        for (sig, samples) in self.header.signals.iter().zip(&self.samples) {
            if !sig.is_annotations() {
                continue;
            }
            let bytes: Vec<u8> = samples.iter().flat_map(|s| s.to_le_bytes()).collect();
            for record in bytes.chunks(sig.samples_per_record * 2) {
                parse_tal_record(record, &mut out)?;
            }
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let h = &self.header;
        let ns = h.signals.len();
        let mut out = Vec::with_capacity(MAIN_HEADER * (ns + 1));
        push_field(&mut out, "0", 8);
        push_field(&mut out, &h.patient, 80);
        push_field(&mut out, &h.recording, 80);
        push_field(&mut out, &h.start_date, 8);
        push_field(&mut out, &h.start_time, 8);
        push_field(&mut out, &(MAIN_HEADER + ns * SIGNAL_HEADER).to_string(), 8);
        push_field(&mut out, &h.reserved, 44);
        push_field(&mut out, &h.num_records.to_string(), 8);
        push_field(&mut out, &format_number(h.record_duration, 8), 8);
        push_field(&mut out, &ns.to_string(), 4);
        let fields: [(usize, fn(&SignalHeader) -> String); 10] = [
            (16, |s| s.label.clone()),
            (80, |s| s.transducer.clone()),
            (8, |s| s.physical_dimension.clone()),
            (8, |s| format_number(s.physical_min, 8)),
            (8, |s| format_number(s.physical_max, 8)),
            (8, |s| s.digital_min.to_string()),
            (8, |s| s.digital_max.to_string()),
            (80, |s| s.prefiltering.clone()),
            (8, |s| s.samples_per_record.to_string()),
            (32, |_| String::new()),
        ];
        for (width, get) in fields {
            for s in &h.signals {
                push_field(&mut out, &get(s), width);
            }
        }
        for r in 0..h.num_records {
            for (sig, samples) in h.signals.iter().zip(&self.samples) {
                let n = sig.samples_per_record;
                for d in &samples[r * n..(r + 1) * n] {
                    out.extend_from_slice(&d.to_le_bytes());
                }
            }
        }
        out
    }

    /// Single-channel EDF holding `physical` quantized to 16 bits over
    /// `[physical_min, physical_max]`. A trailing partial record is zero-padded.
    pub fn single_channel(
        label: &str,
        sample_rate: f64,
        physical: &[f64],
        physical_min: f64,
        physical_max: f64,
        record_duration: f64,
    ) -> Result<Self, EdfError> {
        let spr = sample_rate * record_duration;
        if spr.fract() != 0.0 || spr < 1.0 {
            return Err(EdfError::InvalidSignal(format!(
                "{sample_rate} Hz x {record_duration} s is not a whole number of samples"
            )));
        }
        if !(physical_max > physical_min) {
            return Err(EdfError::InvalidSignal("empty physical range".into()));
        }
        let spr = spr as usize;
        let header = SignalHeader {
            label: label.to_string(),
            transducer: "Ag-AgCl electrodes".into(),
            physical_dimension: "uV".into(),
            physical_min,
            physical_max,
            digital_min: -32768,
            digital_max: 32767,
            prefiltering: String::new(),
            samples_per_record: spr,
        };
        let num_records = physical.len().div_ceil(spr);
        let mut digital: Vec<i16> = physical.iter().map(|&p| header.to_digital(p)).collect();
        digital.resize(num_records * spr, 0);
        Ok(EdfFile {
            header: EdfHeader {
                patient: "X X X X".into(),
                recording: "Startdate X X X X".into(),
                start_date: "01.01.00".into(),
                start_time: "00.00.00".into(),
                reserved: String::new(),
                num_records,
                record_duration,
                signals: vec![header],
            },
            samples: vec![digital],
        })
    }

    /// EDF+ file whose only signal is an annotation list, the layout used by
    /// hypnogram files.
    pub fn annotations_only(annotations: &[Annotation]) -> Self {
        let mut tal = b"+0\x14\x14\x00".to_vec();
        for a in annotations {
            tal.extend_from_slice(format!("+{}\x15{}\x14{}\x14\x00", a.onset_sec, a.duration_sec, a.label).as_bytes());
        }
        if tal.len() % 2 == 1 {
            tal.push(0);
        }
        let samples: Vec<i16> = tal.chunks(2).map(|c| i16::from_le_bytes([c[0], c[1]])).collect();
        let header = SignalHeader {
            label: ANNOTATIONS_LABEL.into(),
            transducer: String::new(),
            physical_dimension: String::new(),
            physical_min: -1.0,
            physical_max: 1.0,
            digital_min: -32768,
            digital_max: 32767,
            prefiltering: String::new(),
            samples_per_record: samples.len(),
        };
        EdfFile {
            header: EdfHeader {
                patient: "X X X X".into(),
                recording: "Startdate X X X X".into(),
                start_date: "01.01.00".into(),
                start_time: "00.00.00".into(),
                reserved: "EDF+C".into(),
                num_records: 1,
                record_duration: 1.0,
                signals: vec![header],
            },
            samples: vec![samples],
        }
    }
}

fn parse_tal_record(record: &[u8], out: &mut Vec<Annotation>) -> Result<(), EdfError> {
    for tal in record.split(|&b| b == 0).filter(|t| !t.is_empty()) {
        let mut parts = tal.split(|&b| b == 0x14);
        let stamp = parts.next().unwrap_or_default();
        let stamp = std::str::from_utf8(stamp).map_err(|_| EdfError::InvalidSignal("non-UTF-8 TAL".into()))?;
        let mut stamp_parts = stamp.split('\x15');
        let onset: f64 = stamp_parts
            .next()
            .unwrap_or_default()
            .parse()
            .map_err(|_| EdfError::InvalidSignal(format!("bad TAL onset `{stamp}`")))?;
        let duration: f64 = match stamp_parts.next() {
            Some(d) if !d.is_empty() => d
                .parse()
                .map_err(|_| EdfError::InvalidSignal(format!("bad TAL duration `{stamp}`")))?,
            _ => 0.0,
        };
        for text in parts.filter(|t| !t.is_empty()) {
            out.push(Annotation {
                onset_sec: onset,
                duration_sec: duration,
                label: String::from_utf8_lossy(text).into_owned(),
            });
        }
    }
    Ok(())
}

fn push_field(out: &mut Vec<u8>, text: &str, width: usize) {
    let mut bytes: Vec<u8> = text.bytes().filter(u8::is_ascii).take(width).collect();
    bytes.resize(width, b' ');
    out.extend_from_slice(&bytes);
}

/// Shortest decimal rendering that fits an ASCII header field.
fn format_number(v: f64, width: usize) -> String {
    let plain = format!("{v}");
    if plain.len() <= width {
        return plain;
    }
    for precision in (0..width).rev() {
        let s = format!("{v:.precision$}");
        if s.len() <= width {
            return s;
        }
    }
    format!("{}", v.round() as i64)
}

/// Reads one channel of an EDF file into a [`NightRecording`] spanning the
/// whole file. Annotations come from an embedded EDF+ annotation signal when
/// present.
pub fn parse_edf(bytes: &[u8], channel: &str) -> Result<NightRecording, EdfError> {
    let file = EdfFile::parse(bytes)?;
    let ch = file.channel(channel)?;
    let annotations = file.annotations()?;
    let duration = ch.physical.len() as f64 / ch.sample_rate;
    Ok(NightRecording {
        subject_id: file.header.patient.split_whitespace().next().unwrap_or("X").to_string(),
        night_index: 1,
        signal: ch.physical,
        sample_rate: ch.sample_rate,
        annotations,
        lights_off: 0.0,
        lights_on: duration,
    })
}
