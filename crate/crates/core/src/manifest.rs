//! Case manifests: a JSON list of cases, each mapping modality keys to image
//! paths, model names to prediction paths, and optionally a ground truth.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Accepted keys in a case's `images` map: the four acquired sequences plus
/// the derived subtraction channel.
pub const MODALITY_KEYS: [&str; 5] = ["t1", "t1gd", "t2", "flair", "t1gd-minus-t1"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseManifest {
    pub id: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub images: BTreeMap<String, PathBuf>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub predictions: BTreeMap<String, PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt: Option<PathBuf>,
}

impl CaseManifest {
    pub fn image(&self, key: &str) -> Result<&Path> {
        self.images
            .get(key)
            .map(PathBuf::as_path)
            .ok_or_else(|| Error::invalid(format!("case {} has no {key} image", self.id)))
    }

    pub fn gt_path(&self) -> Result<&Path> {
        self.gt
            .as_deref()
            .ok_or_else(|| Error::invalid(format!("case {} has no ground truth", self.id)))
    }

    /// Model names in deterministic (sorted) order.
    pub fn model_names(&self) -> Vec<&str> {
        self.predictions.keys().map(String::as_str).collect()
    }

    fn referenced_paths(&self) -> Vec<(&Path, String)> {
        let mut out = Vec::new();
        for (key, path) in &self.images {
            out.push((path.as_path(), format!("case {}, image {key}", self.id)));
        }
        for (name, path) in &self.predictions {
            out.push((path.as_path(), format!("case {}, prediction {name}", self.id)));
        }
        if let Some(gt) = &self.gt {
            out.push((gt.as_path(), format!("case {}, ground truth", self.id)));
        }
        out
    }
}

/// Structural checks: nonempty unique ids and known modality keys.
pub fn validate_cases(cases: &[CaseManifest]) -> Result<()> {
    if cases.is_empty() {
        return Err(Error::invalid("manifest lists no cases"));
    }
    let mut seen = BTreeSet::new();
    for case in cases {
        if case.id.is_empty() {
            return Err(Error::invalid("manifest case with empty id"));
        }
        if !seen.insert(&case.id) {
            return Err(Error::invalid(format!("duplicate case id {}", case.id)));
        }
        for key in case.images.keys() {
            if !MODALITY_KEYS.contains(&key.as_str()) {
                return Err(Error::invalid(format!(
                    "case {}: unknown modality key {key:?}; expected one of {MODALITY_KEYS:?}",
                    case.id
                )));
            }
        }
    }
    Ok(())
}

/// Fail on the first referenced path that does not exist, naming it.
pub fn check_files_exist(cases: &[CaseManifest]) -> Result<()> {
    for case in cases {
        for (path, context) in case.referenced_paths() {
            if !path.exists() {
                return Err(Error::MissingFile {
                    path: path.to_path_buf(),
                    context,
                });
            }
        }
    }
    Ok(())
}

/// Load and validate a manifest file (a JSON array of cases).
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<CaseManifest>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile {
                path: path.to_path_buf(),
                context: "manifest".to_string(),
            }
        } else {
            Error::io(path, e)
        }
    })?;
    let cases: Vec<CaseManifest> = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    validate_cases(&cases)?;
    Ok(cases)
}
