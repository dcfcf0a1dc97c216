//! JSON manifests tying sample ids to TZR files.
//!
//! Paths inside a manifest are relative to the manifest's own directory.
//! Three layouts exist:
//!
//! * feature manifests: `{sample_id, label, stage_paths, logits_path}`, one
//!   TZR per backbone stage plus optional logits;
//! * image manifests: `{sample_id, label, path}`;
//! * corruption manifests: `{source_id, family, severity, seed, path}`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{read_tensor, Tensor};

/// Label used for unlabeled and OOD samples.
pub const NO_LABEL: i64 = -1;

fn no_label() -> i64 {
    NO_LABEL
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureEntry {
    pub sample_id: String,
    #[serde(default = "no_label")]
    pub label: i64,
    pub stage_paths: Vec<String>,
    #[serde(default)]
    pub logits_path: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub sample_id: String,
    #[serde(default = "no_label")]
    pub label: i64,
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionEntry {
    pub source_id: String,
    pub family: String,
    pub severity: u8,
    pub seed: u64,
    pub path: String,
}

impl CorruptionEntry {
    pub fn sample_id(&self) -> String {
        format!("{}-{}-s{}", self.source_id, self.family, self.severity)
    }
}

/// A manifest file loaded together with the directory its paths are
/// relative to.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest<T> {
    pub base: PathBuf,
    pub entries: Vec<T>,
}

pub type FeatureManifest = Manifest<FeatureEntry>;

fn base_dir(path: &Path) -> PathBuf {
    path.parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

impl<T: DeserializeOwned + Serialize> Manifest<T> {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let entries: Vec<T> = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        if entries.is_empty() {
            return Err(Error::Data(format!("{}: manifest is empty", path.display())));
        }
        Ok(Self {
            base: base_dir(path),
            entries,
        })
    }

    /// Writes the entries as a pretty-printed JSON array.
    pub fn save(entries: &[T], path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(entries).map_err(|e| Error::json(path, e))?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.base.join(rel)
    }
}

impl FeatureManifest {
    /// Checks that every referenced file decodes and that all entries have
    /// the same number of stages and the same per-stage shapes.
    pub fn validate(&self) -> Result<usize> {
        let first = &self.entries[0];
        let stages = first.stage_paths.len();
        if stages == 0 {
            return Err(Error::Data(format!(
                "sample {} lists no stage files",
                first.sample_id
            )));
        }
        let mut shapes: Option<Vec<Vec<usize>>> = None;
        for e in &self.entries {
            if e.stage_paths.len() != stages {
                return Err(Error::Data(format!(
                    "sample {} has {} stages, expected {stages}",
                    e.sample_id,
                    e.stage_paths.len()
                )));
            }
            if e.logits_path.is_some() != first.logits_path.is_some() {
                return Err(Error::Data(format!(
                    "sample {} disagrees with the first entry about logits",
                    e.sample_id
                )));
            }
            let mut these = Vec::with_capacity(stages + 1);
            for rel in e.stage_paths.iter().chain(e.logits_path.iter()) {
                these.push(read_tensor(self.resolve(rel))?.shape().to_vec());
            }
            match &shapes {
                None => shapes = Some(these),
                Some(s) if *s != these => {
                    return Err(Error::Data(format!(
                        "sample {} has tensor shapes {these:?}, expected {s:?}",
                        e.sample_id
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(stages)
    }
}

/// An image to score, whatever manifest it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub sample_id: String,
    pub label: i64,
    pub path: PathBuf,
}

impl ImageRecord {
    pub fn load(&self) -> Result<Tensor> {
        read_tensor(&self.path)
    }
}

/// Loads an image or corruption manifest into resolved records.
pub fn load_image_records(path: impl AsRef<Path>) -> Result<Vec<ImageRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let values: Vec<serde_json::Value> =
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    if values.is_empty() {
        return Err(Error::Data(format!("{}: manifest is empty", path.display())));
    }
    let base = base_dir(path);
    values
        .into_iter()
        .map(|v| {
            if v.get("source_id").is_some() {
                let e: CorruptionEntry =
                    serde_json::from_value(v).map_err(|e| Error::json(path, e))?;
                Ok(ImageRecord {
                    sample_id: e.sample_id(),
                    label: NO_LABEL,
                    path: base.join(&e.path),
                })
            } else {
                let e: ImageEntry = serde_json::from_value(v).map_err(|e| Error::json(path, e))?;
                Ok(ImageRecord {
                    sample_id: e.sample_id,
                    label: e.label,
                    path: base.join(&e.path),
                })
            }
        })
        .collect()
}

/// True when the manifest at `path` lists per-stage features rather than
/// images.
pub fn is_feature_manifest(path: impl AsRef<Path>) -> Result<bool> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let values: Vec<serde_json::Value> =
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    Ok(values
        .first()
        .is_some_and(|v| v.get("stage_paths").is_some()))
}
