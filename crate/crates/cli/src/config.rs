//! The run configuration document and flag overrides.

use std::path::{Path, PathBuf};

use breechmark::cmc::CmcParams;
use breechmark::net::ModelConfig;
use breechmark::preprocess::PreprocessParams;
use breechmark::scan_io::SynthParams;
use breechmark::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::UsageError;

/// Manifests of raw scans (x3p or internal files). `train` feeds
/// `preprocess` and then `train`; `eval` holds the held-out guns.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Manifests {
    pub train: Option<PathBuf>,
    pub eval: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    /// Seeds model initialization; run `r` of a multi-run training uses `seed + r`.
    pub seed: u64,
    /// Guns (last in sorted id order) that `synth` sets aside as the eval split.
    pub holdout_guns: usize,
    pub manifests: Manifests,
    pub synth: SynthParams,
    pub preprocess: PreprocessParams,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub cmc: CmcParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("run"),
            seed: 0,
            holdout_guns: 0,
            manifests: Manifests::default(),
            synth: SynthParams::default(),
            preprocess: PreprocessParams::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            cmc: CmcParams::default(),
        }
    }
}

/// Parses `value` as a TOML value, falling back to a bare string.
fn parse_value(value: &str) -> toml::Value {
    format!("v = {value}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()))
}

/// Applies one `dotted.key=value` override.
fn apply_set(table: &mut toml::Table, assignment: &str) -> Result<(), UsageError> {
    let (key, value) = assignment
        .split_once('=')
        .ok_or_else(|| UsageError(format!("--set expects key=value, got {assignment:?}")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(UsageError(format!("--set has an empty key segment in {key:?}")));
    }
    let mut node = table;
    for part in &parts[..parts.len() - 1] {
        let entry = node
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| UsageError(format!("--set {key}: `{part}` is not a section")))?;
    }
    node.insert(parts[parts.len() - 1].to_string(), parse_value(value.trim()));
    Ok(())
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl RunConfig {
    /// Reads `path` (or starts from defaults), applies `--set` overrides and
    /// validates the result. Relative paths in the file are taken relative
    /// to the file's directory.
    pub fn load(path: Option<&Path>, sets: &[String]) -> Result<Self, UsageError> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| UsageError(format!("cannot read config {}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| UsageError(format!("config {} is not valid TOML: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for s in sets {
            apply_set(&mut table, s)?;
        }
        let mut cfg: RunConfig = serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
            let field = e.path().to_string();
            UsageError(format!("config error at `{field}`: {}", e.into_inner()))
        })?;
        if let Some(base) = path.and_then(Path::parent) {
            resolve(base, &mut cfg.output_dir);
            for m in [&mut cfg.manifests.train, &mut cfg.manifests.eval].into_iter().flatten() {
                resolve(base, m);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), UsageError> {
        fn tag(section: &str, e: impl std::fmt::Display) -> UsageError {
            UsageError(format!("config error in [{section}]: {e}"))
        }
        self.synth.validate().map_err(|e| tag("synth", e))?;
        self.model.validate().map_err(|e| tag("model", e))?;
        self.train.validate().map_err(|e| tag("train", e))?;
        self.cmc.validate().map_err(|e| tag("cmc", e))?;
        if self.holdout_guns >= self.synth.guns && self.holdout_guns > 0 {
            return Err(UsageError(format!(
                "config error at `holdout_guns`: {} leaves no training guns out of {}",
                self.holdout_guns, self.synth.guns
            )));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sets_override_nested_fields() {
        let cfg = RunConfig::load(None, &["train.epochs=40".into(), "model.variant=\"block-depth2\"".into()]).unwrap();
        assert_eq!(cfg.train.epochs, 40);
        assert_eq!(cfg.model.variant, breechmark::net::Variant::BlockDepth2);
        // bare strings need no quotes
        let cfg = RunConfig::load(None, &["model.variant=double-block".into()]).unwrap();
        assert_eq!(cfg.model.variant, breechmark::net::Variant::DoubleBlock);
    }

    #[test]
    fn unknown_keys_report_their_path() {
        let err = RunConfig::load(None, &["train.epoch=40".into()]).unwrap_err();
        assert!(err.0.contains("train.epoch"), "{}", err.0);
        let err = RunConfig::load(None, &["cmc.grid=\"eight\"".into()]).unwrap_err();
        assert!(err.0.contains("cmc.grid"), "{}", err.0);
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }
}
