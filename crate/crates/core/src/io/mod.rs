//! File formats: FMAP tensor dumps, binary PGM/PPM images, JSON Lines
//! manifests, model directories and JSON reports. All binary encodings are
//! little-endian.

use std::path::{Path, PathBuf};

use thiserror::Error;

pub mod fmap;
pub mod manifest;
pub mod model_dir;
pub mod pnm;
pub mod report;

pub use fmap::{decode_fmap, encode_fmap, read_fmap, write_fmap};
pub use manifest::{parse_manifest, read_manifest, ManifestRecord};
pub use model_dir::{read_model, write_model};
pub use pnm::{decode_pnm, encode_pnm, read_image, write_image};
pub use report::{Aggregate, RecordReport, ReportDocument};

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("BadMagic at offset {offset}: found {found:02X?}")]
    BadMagic { offset: usize, found: Vec<u8> },
    #[error("UnsupportedVersion at offset {offset}: {found}")]
    UnsupportedVersion { offset: usize, found: u8 },
    #[error("UnsupportedDtype at offset {offset}: {found}")]
    UnsupportedDtype { offset: usize, found: u8 },
    #[error("UnsupportedRank at offset {offset}: ndim {found} not in 1..=4")]
    UnsupportedRank { offset: usize, found: u8 },
    #[error("ZeroDim at offset {offset}")]
    ZeroDim { offset: usize },
    #[error("LengthMismatch in {field} at offset {offset}: expected {expected} bytes, found {found}")]
    LengthMismatch {
        field: &'static str,
        offset: usize,
        expected: u64,
        found: u64,
    },
    #[error("NonFinite value at offset {offset}")]
    NonFinite { offset: usize },
    #[error("UnsupportedFormat: {0}")]
    UnsupportedFormat(String),
    #[error("CorruptHeader at offset {offset}: {detail}")]
    CorruptHeader { offset: usize, detail: String },
    #[error("TruncatedPayload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("ParseError at line {line}: {detail}")]
    ParseError { line: usize, detail: String },
    #[error("BoxOutOfBounds at line {line}: {detail}")]
    BoxOutOfBounds { line: usize, detail: String },
    #[error("ShapeMismatch at layer {layer}: {detail}")]
    ShapeMismatch { layer: usize, detail: String },
    #[error("MissingWeightFile: {name}")]
    MissingWeightFile { name: String },
    #[error("{name}: {source}")]
    InFile {
        name: String,
        #[source]
        source: Box<FormatError>,
    },
    #[error("invalid model: {0}")]
    InvalidModel(String),
}

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>, FormatError> {
    std::fs::read(path).map_err(|source| FormatError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), FormatError> {
    std::fs::write(path, bytes).map_err(|source| FormatError::Io {
        path: path.to_path_buf(),
        source,
    })
}
