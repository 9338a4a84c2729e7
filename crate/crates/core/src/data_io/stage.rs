use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::DataError;

/// The five scored sleep stages. Declaration order is the class index order
/// used everywhere (one-hot vectors, confusion matrices, tie-breaking).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SleepStage {
    W,
    N1,
    N2,
    N3,
    Rem,
}

pub const NUM_STAGES: usize = 5;

impl SleepStage {
    pub const ALL: [SleepStage; NUM_STAGES] =
        [SleepStage::W, SleepStage::N1, SleepStage::N2, SleepStage::N3, SleepStage::Rem];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            SleepStage::W => "W",
            SleepStage::N1 => "N1",
            SleepStage::N2 => "N2",
            SleepStage::N3 => "N3",
            SleepStage::Rem => "REM",
        }
    }

    pub fn one_hot(self) -> [f64; NUM_STAGES] {
        let mut v = [0.0; NUM_STAGES];
        v[self.index()] = 1.0;
        v
    }
}

impl fmt::Display for SleepStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Scoring categories as they appear in R&K-style annotations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RawStage {
    W,
    N1,
    N2,
    N3,
    N4,
    Rem,
    Movement,
    Unknown,
}

impl RawStage {
    /// N4 merges into N3; movement and unknown epochs are dropped.
    pub fn to_stage(self) -> Option<SleepStage> {
        match self {
            RawStage::W => Some(SleepStage::W),
            RawStage::N1 => Some(SleepStage::N1),
            RawStage::N2 => Some(SleepStage::N2),
            RawStage::N3 | RawStage::N4 => Some(SleepStage::N3),
            RawStage::Rem => Some(SleepStage::Rem),
            RawStage::Movement | RawStage::Unknown => None,
        }
    }
}

impl FromStr for RawStage {
    type Err = DataError;

    /// Accepts short codes (`W`, `N1`, `REM`, `MOVEMENT`, ...) and the
    /// Sleep-EDF hypnogram spellings (`Sleep stage 1`, `Movement time`, ...).
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        let t = t.strip_prefix("Sleep stage ").unwrap_or(t);
        let stage = match t.to_ascii_uppercase().as_str() {
            "W" | "WAKE" => RawStage::W,
            "N1" | "1" | "S1" => RawStage::N1,
            "N2" | "2" | "S2" => RawStage::N2,
            "N3" | "3" | "S3" => RawStage::N3,
            "N4" | "4" | "S4" => RawStage::N4,
            "R" | "REM" => RawStage::Rem,
            "MOVEMENT" | "MOVEMENT TIME" | "M" | "MT" => RawStage::Movement,
            "UNKNOWN" | "?" | "U" => RawStage::Unknown,
            _ => return Err(DataError::UnknownLabel(s.to_string())),
        };
        Ok(stage)
    }
}

/// Maps raw annotation labels onto the five-stage set; `None` marks an
/// excluded epoch.
pub fn map_stages<S: AsRef<str>>(raw: &[S]) -> Result<Vec<Option<SleepStage>>, DataError> {
    raw.iter()
        .map(|s| s.as_ref().parse::<RawStage>().map(RawStage::to_stage))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn merges_n4_and_drops_movement() {
        let mapped = map_stages(&["W", "N4", "MOVEMENT", "REM"]).unwrap();
        assert_eq!(mapped, vec![Some(SleepStage::W), Some(SleepStage::N3), None, Some(SleepStage::Rem)]);
    }

    #[test]
    fn identity_and_empty() {
        assert_eq!(map_stages(&["W"; 4]).unwrap(), vec![Some(SleepStage::W); 4]);
        assert!(map_stages::<&str>(&[]).unwrap().is_empty());
    }

    #[test]
    fn sleep_edf_spellings() {
        let mapped = map_stages(&["Sleep stage 4", "Sleep stage R", "Sleep stage ?", "Movement time"]).unwrap();
        assert_eq!(mapped, vec![Some(SleepStage::N3), Some(SleepStage::Rem), None, None]);
    }

    #[test]
    fn unknown_label_is_named() {
        let err = map_stages(&["W", "N5"]).unwrap_err();
        assert!(err.to_string().contains("N5"));
    }
}
