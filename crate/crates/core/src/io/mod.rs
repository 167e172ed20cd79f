//! Readers and writers for the on-disk formats.
//!
//! | file       | layout                                                        |
//! |------------|---------------------------------------------------------------|
//! | `.bin`     | N × (x, y, z, intensity) as little-endian `f32`                |
//! | `.label`   | N × little-endian `u32`: low 16 bits semantic, high 16 instance |
//! | `.levk`    | prediction container, see [`prediction`]                       |
//! | manifest   | CSV: `frame_id,points,labels,predictions`                     |
//!
//! All decoding is explicit little-endian and does not depend on the host.

mod frame;
mod manifest;
pub mod prediction;

use std::path::PathBuf;

use thiserror::Error;

pub use frame::{
    decode_label_word, encode_label_word, read_label_frame, read_point_frame, write_augmented_frame,
    write_label_frame, write_point_frame, LabelFrame, Point, PointFrame,
};
pub use manifest::{Manifest, ManifestEntry};
pub use prediction::{read_prediction_csv, read_prediction_set, write_prediction_set, PredictionSet, IGNORE_GT};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("file length {len} is not a multiple of {record} bytes")]
    TruncatedFile { len: u64, record: usize },
    #[error("non-finite coordinate at point {index}")]
    NonFiniteValue { index: usize },
    #[error("found {found} records, expected {expected}")]
    LengthMismatch { found: usize, expected: usize },
    #[error("bad magic, not a .levk file")]
    BadMagic,
    #[error("inconsistent header: {0}")]
    HeaderInconsistent(String),
    #[error("probability vector at point {index} is not normalized")]
    ProbabilityNotNormalized { index: usize },
    #[error("malformed CSV: {0}")]
    Csv(String),
    #[error("invalid frame id {0:?}")]
    InvalidFrameId(String),
}

impl IoError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        IoError::Io { path: path.into(), source }
    }
}

impl From<csv::Error> for IoError {
    fn from(e: csv::Error) -> Self {
        IoError::Csv(e.to_string())
    }
}
