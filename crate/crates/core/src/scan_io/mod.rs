//! Scan ingestion, persistence and synthetic dataset generation.
//!
//! Three on-disk formats are handled here:
//!
//! - x3p containers (read only): a zip archive with `main.xml` and a
//!   float64 little-endian raster, NaN marking missing samples.
//! - `BMK1` scan files: the lossless internal format for [`ScanRecord`].
//! - manifests: CSV files with header `path,gun_id,casing_id`.

pub(crate) mod internal;
mod manifest;
mod synth;
mod x3p;

use std::path::PathBuf;

use thiserror::Error;

use crate::surface::{SurfaceError, SurfaceMatrix};

pub use internal::{read_internal, write_internal, INTERNAL_VERSION};
pub use manifest::{load_dataset, read_manifest, write_manifest, DatasetManifest, ManifestEntry};
pub use synth::{band_limited_surface, generate_synthetic_dataset, SynthParams};
pub use x3p::read_x3p;

#[derive(Debug, Error)]
pub enum ScanIoError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("zip container {path}: {message}")]
    Container { path: PathBuf, message: String },
    #[error("malformed x3p metadata: {0}")]
    Xml(String),
    #[error("x3p metadata is missing field `{0}`")]
    MissingField(&'static str),
    #[error("x3p field `{field}` has unparseable value {value:?}")]
    BadField { field: &'static str, value: String },
    #[error("raster holds {got} bytes but SizeX*SizeY*8 = {expected}")]
    SizeMismatch { expected: usize, got: usize },
    #[error("unsupported x3p geometry: {0}")]
    UnsupportedGeometry(String),
    #[error("not a {expected} file (magic {found:?})")]
    BadMagic { expected: &'static str, found: [u8; 4] },
    #[error("unsupported format version {found} (this build reads version {expected})")]
    Version { found: u32, expected: u32 },
    #[error("truncated file: {0}")]
    Truncated(&'static str),
    #[error("{0} unexpected bytes after the end of the data")]
    TrailingBytes(usize),
    #[error("label is not valid UTF-8")]
    Utf8,
    #[error("invalid labels: {0}")]
    Label(String),
    #[error("manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("missing input files: {}", .0.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "))]
    MissingInputs(Vec<PathBuf>),
    #[error("invalid synthetic parameters: {0}")]
    Params(String),
    #[error(transparent)]
    Surface(#[from] SurfaceError),
}

impl ScanIoError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}

/// A scan read from disk before labels are attached.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledScan {
    pub surface: SurfaceMatrix,
    pub source_path: String,
}

impl UnlabeledScan {
    pub fn label(self, gun_id: &str, casing_id: &str) -> Result<ScanRecord, ScanIoError> {
        ScanRecord::new(self.surface, gun_id, casing_id, self.source_path)
    }
}

/// A scan with its firearm (`gun_id`) and casing labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanRecord {
    pub surface: SurfaceMatrix,
    pub gun_id: String,
    pub casing_id: String,
    pub source_path: String,
}

impl ScanRecord {
    pub fn new(
        surface: SurfaceMatrix,
        gun_id: impl Into<String>,
        casing_id: impl Into<String>,
        source_path: impl Into<String>,
    ) -> Result<Self, ScanIoError> {
        let gun_id = gun_id.into();
        let casing_id = casing_id.into();
        if gun_id.is_empty() || casing_id.is_empty() {
            return Err(ScanIoError::Label("gun_id and casing_id must be non-empty".into()));
        }
        Ok(Self {
            surface,
            gun_id,
            casing_id,
            source_path: source_path.into(),
        })
    }
}
