use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::io::{read_json, write_json};
use super::{load_atlas, load_volume, AtlasLabelMap, Volume3D};
use crate::error::{Error, Result};

/// One subject. `label` is 0 for HC and 1 for MDD.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectRecord {
    pub id: String,
    pub volume_path: String,
    pub label: u8,
    pub site_id: u32,
    #[serde(default)]
    pub covariates: BTreeMap<String, f64>,
}

/// Cohort description; paths are relative to the manifest file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub subjects: Vec<SubjectRecord>,
    #[serde(default)]
    pub atlas_path: Option<String>,
    pub seed: u64,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        for s in &self.subjects {
            if !ids.insert(s.id.as_str()) {
                return Err(Error::Input(format!("duplicate subject id {}", s.id)));
            }
            if s.label > 1 {
                return Err(Error::Input(format!(
                    "subject {} has label {}, expected 0 or 1",
                    s.id, s.label
                )));
            }
        }
        for class in 0..=1u8 {
            if !self.subjects.iter().any(|s| s.label == class) {
                return Err(Error::Input(format!("class {class} has no subjects")));
            }
        }
        Ok(())
    }

    pub fn labels(&self) -> Vec<u8> {
        self.subjects.iter().map(|s| s.label).collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: DatasetManifest = read_json(path)?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

/// Access to a cohort's volumes, whether on disk or generated on demand.
pub trait VolumeSource: Sync {
    fn subjects(&self) -> &[SubjectRecord];
    fn atlas(&self) -> Option<&AtlasLabelMap>;
    fn load(&self, index: usize) -> Result<Volume3D>;
}

/// A manifest on disk together with its atlas.
#[derive(Debug, Clone)]
pub struct ManifestSource {
    pub manifest: DatasetManifest,
    base_dir: PathBuf,
    atlas: Option<AtlasLabelMap>,
}

impl ManifestSource {
    pub fn open(manifest_path: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(manifest_path)?;
        let base_dir = manifest_path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        let atlas = manifest
            .atlas_path
            .as_ref()
            .map(|p| load_atlas(&base_dir.join(p)))
            .transpose()?;
        Ok(ManifestSource {
            manifest,
            base_dir,
            atlas,
        })
    }
}

impl VolumeSource for ManifestSource {
    fn subjects(&self) -> &[SubjectRecord] {
        &self.manifest.subjects
    }

    fn atlas(&self) -> Option<&AtlasLabelMap> {
        self.atlas.as_ref()
    }

    fn load(&self, index: usize) -> Result<Volume3D> {
        load_volume(&self.base_dir.join(&self.manifest.subjects[index].volume_path))
    }
}
