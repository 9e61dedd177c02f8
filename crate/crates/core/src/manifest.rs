//! Subject manifest: one JSON object per line.
//!
//! ```text
//! {"subject_id": "S001", "split": "train", "label": "AD", "mmse": 18}
//! {"subject_id": "S160", "split": "test",  "label": "HC", "mmse": null}
//! ```
//!
//! `mmse` may be `null` or omitted. Blank lines and lines starting with `#`
//! are skipped.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mmse::{ClassLabel, MmseScore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub subject_id: String,
    pub split: Split,
    pub label: ClassLabel,
    #[serde(default)]
    pub mmse: Option<MmseScore>,
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("cannot read manifest {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest line {line}: {message}")]
    Record { line: usize, message: String },
    #[error("manifest line {line}: duplicate subject {subject_id}")]
    Duplicate { line: usize, subject_id: String },
}

/// Subjects keyed by id, iterated in id order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    entries: BTreeMap<String, ManifestEntry>,
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self, ManifestError> {
        let mut entries = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let entry: ManifestEntry =
                serde_json::from_str(trimmed).map_err(|e| ManifestError::Record { line, message: e.to_string() })?;
            if entry.subject_id.trim().is_empty() {
                return Err(ManifestError::Record { line, message: "empty subject_id".into() });
            }
            if entries.contains_key(&entry.subject_id) {
                return Err(ManifestError::Duplicate { line, subject_id: entry.subject_id });
            }
            entries.insert(entry.subject_id.clone(), entry);
        }
        Ok(Manifest { entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ManifestError> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).map_err(|source| ManifestError::Io { path: path.to_path_buf(), source })?;
        Self::parse(&text)
    }

    pub fn from_entries(list: impl IntoIterator<Item = ManifestEntry>) -> Self {
        Manifest { entries: list.into_iter().map(|e| (e.subject_id.clone(), e)).collect() }
    }

    pub fn get(&self, subject_id: &str) -> Option<&ManifestEntry> {
        self.entries.get(subject_id)
    }

    pub fn entries(&self) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.values()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count(&self, split: Split) -> usize {
        self.entries.values().filter(|e| e.split == split).count()
    }

    pub fn count_label(&self, label: ClassLabel) -> usize {
        self.entries.values().filter(|e| e.label == label).count()
    }

    pub fn to_jsonl(&self) -> String {
        self.entries.values().map(|e| serde_json::to_string(e).expect("manifest entry serializes") + "\n").collect()
    }
}
