use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{read_internal, read_x3p, ScanIoError, ScanRecord};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub gun_id: String,
    pub casing_id: String,
}

/// A labelled list of scan files. Relative paths are resolved against the
/// directory holding the manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub name: String,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(name: impl Into<String>, entries: Vec<ManifestEntry>) -> Result<Self, ScanIoError> {
        let name = name.into();
        let mut seen = HashSet::new();
        for e in &entries {
            if e.gun_id.is_empty() || e.casing_id.is_empty() {
                return Err(ScanIoError::Label(format!(
                    "empty label for {}",
                    e.path.display()
                )));
            }
            if !seen.insert((e.gun_id.as_str(), e.casing_id.as_str())) {
                return Err(ScanIoError::Label(format!(
                    "duplicate (gun_id, casing_id) = ({}, {})",
                    e.gun_id, e.casing_id
                )));
            }
        }
        Ok(Self { name, entries })
    }
}

/// Reads a `path,gun_id,casing_id` manifest and checks every file exists.
pub fn read_manifest(path: &Path) -> Result<DatasetManifest, ScanIoError> {
    let manifest_err = |message: String| ScanIoError::Manifest {
        path: path.to_path_buf(),
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| manifest_err(e.to_string()))?;
    let headers = reader.headers().map_err(|e| manifest_err(e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["path", "gun_id", "casing_id"] {
        return Err(manifest_err(format!(
            "expected header `path,gun_id,casing_id`, got `{}`",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut entries = Vec::new();
    for row in reader.deserialize::<ManifestEntry>() {
        let mut entry = row.map_err(|e| manifest_err(e.to_string()))?;
        if entry.path.is_relative() {
            entry.path = base.join(&entry.path);
        }
        entries.push(entry);
    }
    let missing: Vec<PathBuf> = entries
        .iter()
        .filter(|e| !e.path.is_file())
        .map(|e| e.path.clone())
        .collect();
    if !missing.is_empty() {
        return Err(ScanIoError::MissingInputs(missing));
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    DatasetManifest::new(name, entries)
}

/// Writes the manifest; paths under `path`'s directory are stored relative.
pub fn write_manifest(manifest: &DatasetManifest, path: &Path) -> Result<(), ScanIoError> {
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut writer = csv::Writer::from_path(path).map_err(|e| ScanIoError::Manifest {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    for e in &manifest.entries {
        let stored = e.path.strip_prefix(base).unwrap_or(&e.path);
        writer
            .serialize(ManifestEntry {
                path: stored.to_path_buf(),
                gun_id: e.gun_id.clone(),
                casing_id: e.casing_id.clone(),
            })
            .map_err(|err| ScanIoError::Manifest {
                path: path.to_path_buf(),
                message: err.to_string(),
            })?;
    }
    writer.flush().map_err(|e| ScanIoError::io(path, e))
}

/// Loads every scan in the manifest. `.x3p` files go through the x3p reader,
/// everything else is read as an internal scan file and relabelled from the
/// manifest.
pub fn load_dataset(manifest: &DatasetManifest) -> Result<Vec<ScanRecord>, ScanIoError> {
    manifest
        .entries
        .iter()
        .map(|e| {
            let is_x3p = e
                .path
                .extension()
                .is_some_and(|ext| ext.eq_ignore_ascii_case("x3p"));
            if is_x3p {
                read_x3p(&e.path)?.label(&e.gun_id, &e.casing_id)
            } else {
                let mut rec = read_internal(&e.path)?;
                rec.gun_id.clone_from(&e.gun_id);
                rec.casing_id.clone_from(&e.casing_id);
                Ok(rec)
            }
        })
        .collect()
}
