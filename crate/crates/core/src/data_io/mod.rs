//! Night recordings: EDF ingestion, stage label mapping, in-bed trimming and
//! synthetic cohort generation.

mod edf;
mod recording;
mod stage;
mod synthetic;

use thiserror::Error;

pub use edf::{parse_edf, Channel, EdfError, EdfFile, EdfHeader, SignalHeader, ANNOTATIONS_LABEL};
pub use recording::{
    read_annotations_csv, trim_in_bed, write_annotations_csv, Annotation, NightRecording, EPOCH_SEC,
};
pub use stage::{map_stages, RawStage, SleepStage, NUM_STAGES};
pub use synthetic::{
    generate_synthetic_cohort, hypnogram_to_annotations, neighbours, transition_matrix, CohortSpec,
    SpectralPeak, StageTemplates, SubjectVariation,
};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("unrecognized stage label `{0}`")]
    UnknownLabel(String),
    #[error("invalid recording: {0}")]
    InvalidRecording(String),
    #[error("in-bed window [{lights_off}, {lights_on}) s holds no complete 30 s epoch")]
    EmptyWindow { lights_off: f64, lights_on: f64 },
    #[error("invalid cohort spec: {0}")]
    InvalidCohort(String),
    #[error("annotation CSV: {0}")]
    Csv(String),
    #[error(transparent)]
    Edf(#[from] EdfError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
