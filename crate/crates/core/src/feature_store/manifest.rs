use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::gadf::{read_record, FormatError};
use super::record::{FeatureRecord, Label};
use crate::rng::PortableRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
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

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Path as written in the manifest, relative to `root` unless absolute.
    pub path: String,
    pub split: Split,
    #[serde(rename = "class")]
    pub class_name: String,
    pub label: Label,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ManifestWarning {
    EmptyTestSplit,
}

/// A manifest that passed validation, with the root resolved against the
/// manifest's own location.
#[derive(Clone, Debug)]
pub struct LoadedManifest {
    pub manifest: DatasetManifest,
    pub root: PathBuf,
    pub warnings: Vec<ManifestWarning>,
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("cannot read manifest {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed manifest {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("feature file {0} does not exist")]
    MissingFile(PathBuf),
    #[error("train split must be normal-only, but {path} is labelled {label:?}")]
    AnomalousInTrain { path: String, label: Label },
    #[error("{path}: {source}")]
    Record {
        path: PathBuf,
        #[source]
        source: FormatError,
    },
    #[error("record {path} is labelled {found:?} in the file but {expected:?} in the manifest")]
    LabelMismatch {
        path: PathBuf,
        expected: Label,
        found: Label,
    },
}

/// A manifest entry together with its parsed record.
#[derive(Clone, Debug)]
pub struct LoadedRecord {
    pub entry: ManifestEntry,
    pub path: PathBuf,
    pub record: FeatureRecord,
}

impl LoadedManifest {
    /// Validates a manifest that is already in memory. Relative roots are
    /// resolved against `base`.
    pub fn from_manifest(manifest: DatasetManifest, base: &Path) -> Result<Self, ManifestError> {
        let root = if manifest.root.is_absolute() {
            manifest.root.clone()
        } else {
            base.join(&manifest.root)
        };
        for e in &manifest.entries {
            if e.split == Split::Train && e.label != Label::Normal {
                return Err(ManifestError::AnomalousInTrain {
                    path: e.path.clone(),
                    label: e.label,
                });
            }
            let p = root.join(&e.path);
            if !p.is_file() {
                return Err(ManifestError::MissingFile(p));
            }
        }
        let mut warnings = Vec::new();
        if !manifest.entries.iter().any(|e| e.split == Split::Test) {
            log::warn!("manifest has an empty test split");
            warnings.push(ManifestWarning::EmptyTestSplit);
        }
        Ok(Self {
            manifest,
            root,
            warnings,
        })
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.path)
    }

    pub fn entries(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.manifest
            .entries
            .iter()
            .filter(move |e| e.split == split)
    }

    pub fn len(&self, split: Split) -> usize {
        self.entries(split).count()
    }

    pub fn is_empty(&self, split: Split) -> bool {
        self.len(split) == 0
    }

    pub fn classes(&self) -> BTreeSet<String> {
        self.manifest
            .entries
            .iter()
            .map(|e| e.class_name.clone())
            .collect()
    }

    /// Keeps only entries of `class_name`.
    pub fn restrict_to_class(&self, class_name: &str) -> LoadedManifest {
        let mut out = self.clone();
        out.manifest.entries.retain(|e| e.class_name == class_name);
        out
    }

    /// Entries of `split`, shuffled deterministically when a seed is given.
    pub fn split_order(&self, split: Split, shuffle_seed: Option<u64>) -> Vec<&ManifestEntry> {
        let mut entries: Vec<&ManifestEntry> = self.entries(split).collect();
        if let Some(seed) = shuffle_seed {
            PortableRng::new(seed).shuffle(&mut entries);
        }
        entries
    }

    pub fn load_entry(&self, entry: &ManifestEntry) -> Result<LoadedRecord, ManifestError> {
        let path = self.resolve(entry);
        let record = read_record(&path).map_err(|source| ManifestError::Record {
            path: path.clone(),
            source,
        })?;
        // Train records must be normal in the file as well as in the manifest.
        if entry.split == Split::Train && record.label != Label::Normal {
            return Err(ManifestError::LabelMismatch {
                path,
                expected: Label::Normal,
                found: record.label,
            });
        }
        Ok(LoadedRecord {
            entry: entry.clone(),
            path,
            record,
        })
    }

    /// Lazily reads the records of `split`, in manifest order or in a
    /// seeded shuffle.
    pub fn iterate_split(
        &self,
        split: Split,
        shuffle_seed: Option<u64>,
    ) -> impl Iterator<Item = Result<LoadedRecord, ManifestError>> + '_ {
        self.split_order(split, shuffle_seed)
            .into_iter()
            .map(move |e| self.load_entry(e))
    }

    pub fn load_split(
        &self,
        split: Split,
        shuffle_seed: Option<u64>,
    ) -> Result<Vec<LoadedRecord>, ManifestError> {
        self.iterate_split(split, shuffle_seed).collect()
    }
}

pub fn load_manifest(path: &Path) -> Result<LoadedManifest, ManifestError> {
    let text = fs::read_to_string(path).map_err(|source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|source| ManifestError::Parse {
            path: path.to_path_buf(),
            source,
        })?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    LoadedManifest::from_manifest(manifest, base)
}

pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<(), ManifestError> {
    let text = serde_json::to_string_pretty(manifest).expect("manifest serialises");
    fs::write(path, text).map_err(|source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    })
}
