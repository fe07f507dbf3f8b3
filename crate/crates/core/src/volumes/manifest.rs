//! Dataset manifests: which volume files exist, their ids, and splits.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::VolumeError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub path: PathBuf,
    pub split: Split,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub created: String,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    /// Unique ids; every path resolvable relative to `base`.
    pub fn validate(&self, base: &Path) -> Result<(), VolumeError> {
        let mut ids = HashSet::new();
        for e in &self.entries {
            if !ids.insert(&e.id) {
                return Err(VolumeError::BadManifest(format!("duplicate id {}", e.id)));
            }
            let p = base.join(&e.path);
            if !p.is_file() {
                return Err(VolumeError::BadManifest(format!(
                    "path not resolvable: {}",
                    p.display()
                )));
            }
        }
        Ok(())
    }

    pub fn split_entries(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn save(&self, path: &Path) -> Result<(), VolumeError> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| VolumeError::BadManifest(e.to_string()))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, VolumeError> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| VolumeError::BadManifest(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_id_rejected() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.vol"), b"x").unwrap();
        let m = DatasetManifest {
            seed: 0,
            created: String::new(),
            entries: vec![
                ManifestEntry {
                    id: "a".into(),
                    path: "a.vol".into(),
                    split: Split::Train,
                },
                ManifestEntry {
                    id: "a".into(),
                    path: "a.vol".into(),
                    split: Split::Val,
                },
            ],
        };
        assert!(m.validate(dir.path()).is_err());
    }

    #[test]
    fn missing_path_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = DatasetManifest {
            seed: 0,
            created: String::new(),
            entries: vec![ManifestEntry {
                id: "a".into(),
                path: "missing.vol".into(),
                split: Split::Train,
            }],
        };
        assert!(m.validate(dir.path()).is_err());
    }

    #[test]
    fn round_trips_through_json() {
        let dir = tempfile::tempdir().unwrap();
        let m = DatasetManifest {
            seed: 42,
            created: "cfg-1234".into(),
            entries: vec![ManifestEntry {
                id: "a".into(),
                path: "a.vol".into(),
                split: Split::Train,
            }],
        };
        let p = dir.path().join("manifest.json");
        m.save(&p).unwrap();
        let loaded = DatasetManifest::load(&p).unwrap();
        assert_eq!(loaded.seed, 42);
        assert_eq!(loaded.entries.len(), 1);
        assert_eq!(loaded.entries[0].split, Split::Train);
    }
}
