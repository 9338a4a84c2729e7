//! Binary cache of one preprocessed night.
//!
//! Layout (all integers and floats little-endian):
//!
//! | field | type |
//! |---|---|
//! | magic `SSNIGHT1` | 8 bytes |
//! | format version (= 1) | u32 |
//! | subject id length, subject id | u16, UTF-8 bytes |
//! | night index | u32 |
//! | number of epochs `N`, bins `F`, columns `T` | 3 × u32 |
//! | image values, epoch-major then bin then column | `N·F·T` × f32 |
//! | stage labels (0=W 1=N1 2=N2 3=N3 4=REM) | `N` × u8 |
//! | excluded epoch count | u32 |
//! | normalization axis (0 per-bin, 1 global), group count `K` | u8, u32 |
//! | normalization means, then standard deviations | `2K` × f64 |

use std::io::{Read, Write};

use crate::data_io::SleepStage;

use super::{EpochImage, NormAxis, NormStats, PreparedNight, PreprocessError};

pub const NIGHT_MAGIC: &[u8; 8] = b"SSNIGHT1";
pub const NIGHT_VERSION: u32 = 1;

pub fn write_night<W: Write>(mut w: W, night: &PreparedNight) -> Result<(), PreprocessError> {
    let (f, t) = (night.freq_bins(), night.frames());
    let mut buf = Vec::with_capacity(64 + night.len() * f * t * 4);
    buf.extend_from_slice(NIGHT_MAGIC);
    buf.extend_from_slice(&NIGHT_VERSION.to_le_bytes());
    let id = night.subject_id.as_bytes();
    buf.extend_from_slice(&(id.len() as u16).to_le_bytes());
    buf.extend_from_slice(id);
    buf.extend_from_slice(&night.night_index.to_le_bytes());
    for n in [night.len(), f, t] {
        buf.extend_from_slice(&(n as u32).to_le_bytes());
    }
    for im in &night.images {
        for v in im.values() {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    buf.extend(night.labels.iter().map(|s| s.index() as u8));
    buf.extend_from_slice(&(night.excluded as u32).to_le_bytes());
    buf.push(match night.norm.axis {
        NormAxis::PerBin => 0,
        NormAxis::Global => 1,
    });
    buf.extend_from_slice(&(night.norm.mean.len() as u32).to_le_bytes());
    for v in night.norm.mean.iter().chain(&night.norm.std) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], PreprocessError> {
        let out = self.bytes.get(self.pos..self.pos + n).ok_or_else(|| {
            PreprocessError::Cache(format!("truncated at byte {} (needed {n} more)", self.pos))
        })?;
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, PreprocessError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn read_night<R: Read>(mut r: R) -> Result<PreparedNight, PreprocessError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut rd = Reader { bytes: &bytes, pos: 0 };
    if rd.take(8)? != NIGHT_MAGIC {
        return Err(PreprocessError::Cache("not a night cache file (bad magic)".into()));
    }
    let version = rd.u32()?;
    if version != NIGHT_VERSION {
        return Err(PreprocessError::Cache(format!("unsupported cache version {version}")));
    }
    let id_len = u16::from_le_bytes(rd.take(2)?.try_into().unwrap()) as usize;
    let subject_id = String::from_utf8(rd.take(id_len)?.to_vec())
        .map_err(|_| PreprocessError::Cache("subject id is not UTF-8".into()))?;
    let night_index = rd.u32()?;
    let (n, f, t) = (rd.u32()? as usize, rd.u32()? as usize, rd.u32()? as usize);
    let raw = rd.take(n * f * t * 4)?;
    let mut images = Vec::with_capacity(n);
    for chunk in raw.chunks_exact(f * t * 4) {
        let values = chunk
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        images.push(EpochImage::new(f, t, values));
    }
    let labels = rd
        .take(n)?
        .iter()
        .map(|&b| SleepStage::from_index(b as usize).ok_or_else(|| PreprocessError::Cache(format!("bad label byte {b}"))))
        .collect::<Result<Vec<_>, _>>()?;
    let excluded = rd.u32()? as usize;
    let axis = match rd.take(1)?[0] {
        0 => NormAxis::PerBin,
        1 => NormAxis::Global,
        b => return Err(PreprocessError::Cache(format!("bad normalization axis {b}"))),
    };
    let k = rd.u32()? as usize;
    let floats = rd.take(2 * k * 8)?;
    let vals: Vec<f64> = floats.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
    if rd.pos != bytes.len() {
        return Err(PreprocessError::Cache(format!("{} trailing bytes", bytes.len() - rd.pos)));
    }
    Ok(PreparedNight {
        subject_id,
        night_index,
        images,
        labels,
        norm: NormStats { axis, mean: vals[..k].to_vec(), std: vals[k..].to_vec() },
        excluded,
    })
}
