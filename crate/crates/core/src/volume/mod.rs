//! Volumes, atlases, their on-disk format, dataset manifests and the
//! synthetic phantom cohort.

pub(crate) mod io;
mod manifest;
mod resample;
pub mod synth;

use std::collections::BTreeMap;

use crate::error::{Error, Result};

pub use io::{load_atlas, load_volume, payload_path, save_atlas, save_volume};
pub use manifest::{DatasetManifest, ManifestSource, SubjectRecord, VolumeSource};
pub use resample::{resize_trilinear, sample_trilinear};
pub use synth::{generate_synthetic_dataset, SyntheticDataset, SyntheticParams};

/// Voxel extents `(x, y, z)`.
pub type Dims = [usize; 3];

fn check_dims(dims: Dims) -> Result<usize> {
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::Input(format!("volume extents must be positive, got {dims:?}")));
    }
    Ok(dims.iter().product())
}

/// Dense scalar field, x-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    dims: Dims,
    spacing: [f64; 3],
    data: Vec<f32>,
}

impl Volume3D {
    pub fn new(dims: Dims, spacing: [f64; 3], data: Vec<f32>) -> Result<Self> {
        let n = check_dims(dims)?;
        if data.len() != n {
            return Err(Error::Input(format!(
                "volume {dims:?} needs {n} voxels, got {}",
                data.len()
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Input(format!("spacing must be positive, got {spacing:?}")));
        }
        Ok(Volume3D { dims, spacing, data })
    }

    pub fn filled(dims: Dims, value: f32) -> Result<Self> {
        let n = check_dims(dims)?;
        Self::new(dims, [1.0; 3], vec![value; n])
    }

    /// Builds a volume by evaluating `f(x, y, z)` at every voxel.
    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> f32) -> Result<Self> {
        let n = check_dims(dims)?;
        let mut data = Vec::with_capacity(n);
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    data.push(f(x, y, z));
                }
            }
        }
        Self::new(dims, [1.0; 3], data)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }
}

/// Label field; 0 is background, ROIs are `1..=roi_count`.
#[derive(Debug, Clone, PartialEq)]
pub struct AtlasLabelMap {
    dims: Dims,
    spacing: [f64; 3],
    labels: Vec<u16>,
    roi_count: usize,
    names: Option<BTreeMap<u16, String>>,
}

impl AtlasLabelMap {
    /// Validates that labels are dense in `1..=max` with every label present.
    pub fn new(dims: Dims, spacing: [f64; 3], labels: Vec<u16>) -> Result<Self> {
        let n = check_dims(dims)?;
        if labels.len() != n {
            return Err(Error::Input(format!(
                "atlas {dims:?} needs {n} voxels, got {}",
                labels.len()
            )));
        }
        let roi_count = labels.iter().copied().max().unwrap_or(0) as usize;
        let mut seen = vec![false; roi_count + 1];
        for &l in &labels {
            seen[l as usize] = true;
        }
        if let Some(missing) = (1..=roi_count).find(|&l| !seen[l]) {
            return Err(Error::Input(format!(
                "atlas labels must cover 1..={roi_count}; label {missing} never occurs"
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Input(format!("spacing must be positive, got {spacing:?}")));
        }
        Ok(AtlasLabelMap {
            dims,
            spacing,
            labels,
            roi_count,
            names: None,
        })
    }

    pub fn with_names(mut self, names: BTreeMap<u16, String>) -> Self {
        self.names = Some(names);
        self
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn roi_count(&self) -> usize {
        self.roi_count
    }

    pub fn names(&self) -> Option<&BTreeMap<u16, String>> {
        self.names.as_ref()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> u16 {
        self.labels[x + self.dims[0] * (y + self.dims[1] * z)]
    }
}
