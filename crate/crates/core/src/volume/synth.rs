//! Deterministic synthetic phantom cohort.
//!
//! The atlas is a Voronoi partition of `n_rois` seeded centroids over an
//! ellipsoidal brain mask. Each subject volume, inside the mask, is
//!
//! ```text
//! template[roi] + roi_offset[subject, roi] + field[subject, voxel] + noise
//!     + effect_size   (label 1 subjects, signal ROIs only)
//! ```
//!
//! where `field` is a smooth random field standardized to unit variance over
//! the mask. That unit is the `σ` that `effect_size` is measured in; the
//! per-ROI offsets and voxel noise have standard deviations `roi_sd` and
//! `noise_sd` in the same unit. Background voxels are 0.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::io::write_json;
use super::manifest::{DatasetManifest, SubjectRecord, VolumeSource};
use super::{sample_trilinear, save_atlas, save_volume, AtlasLabelMap, Dims, Volume3D};
use crate::error::{Error, Result};
use crate::rng::stream;

/// MDD share of the reference cohort (1276 MDD, 1104 HC).
pub const REFERENCE_MDD_FRACTION: f64 = 1276.0 / (1276.0 + 1104.0);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticParams {
    pub n_subjects: usize,
    /// Fraction of subjects labelled MDD.
    pub mdd_fraction: f64,
    pub dims: Dims,
    pub spacing: [f64; 3],
    pub n_rois: usize,
    pub signal_rois: Vec<u16>,
    pub effect_size: f64,
    pub seed: u64,
    pub n_sites: u32,
    /// Correlation length of the smooth base field, in voxels.
    pub field_scale: f64,
    pub roi_sd: f64,
    pub noise_sd: f64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        SyntheticParams {
            n_subjects: 200,
            mdd_fraction: REFERENCE_MDD_FRACTION,
            dims: [121, 145, 121],
            spacing: [1.5; 3],
            n_rois: 116,
            signal_rois: vec![3, 11, 19, 27],
            effect_size: 1.0,
            seed: 0,
            n_sites: 4,
            field_scale: 8.0,
            roi_sd: 0.5,
            noise_sd: 0.5,
        }
    }
}

impl SyntheticParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_subjects < 20 {
            return Err(Error::Input(format!(
                "need at least 20 subjects, got {}",
                self.n_subjects
            )));
        }
        if !(self.mdd_fraction > 0.0 && self.mdd_fraction < 1.0) {
            return Err(Error::Input(format!(
                "mdd_fraction {} not in (0, 1)",
                self.mdd_fraction
            )));
        }
        if self.n_rois == 0 || self.n_rois > usize::from(u16::MAX) {
            return Err(Error::Input(format!("n_rois {} out of range", self.n_rois)));
        }
        if let Some(bad) = self
            .signal_rois
            .iter()
            .find(|&&r| r == 0 || usize::from(r) > self.n_rois)
        {
            return Err(Error::Input(format!(
                "signal ROI {bad} is outside the atlas labels 1..={}",
                self.n_rois
            )));
        }
        if !(self.effect_size >= 0.0 && self.effect_size.is_finite()) {
            return Err(Error::Input(format!("effect_size {} must be >= 0", self.effect_size)));
        }
        if self.dims.iter().any(|&d| d < 4) {
            return Err(Error::Input(format!("dims {:?} too small", self.dims)));
        }
        if !(self.field_scale >= 1.0) || self.roi_sd < 0.0 || self.noise_sd < 0.0 {
            return Err(Error::Input("invalid field_scale / roi_sd / noise_sd".into()));
        }
        if self.n_sites == 0 {
            return Err(Error::Input("n_sites must be positive".into()));
        }
        Ok(())
    }

    pub fn n_mdd(&self) -> usize {
        let n = (self.n_subjects as f64 * self.mdd_fraction).round() as usize;
        n.clamp(1, self.n_subjects - 1)
    }
}

/// A generated cohort; volumes are synthesized on demand.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub params: SyntheticParams,
    pub atlas: AtlasLabelMap,
    pub manifest: DatasetManifest,
    template: Vec<f64>,
    signal: Vec<bool>,
}

pub fn generate_synthetic_dataset(params: &SyntheticParams) -> Result<SyntheticDataset> {
    params.validate()?;
    let atlas = synthesize_atlas(params)?;

    let mut trng = stream(params.seed, "template", 0);
    let template = (0..=params.n_rois)
        .map(|l| if l == 0 { 0.0 } else { trng.gen_range(2.0..6.0) })
        .collect();
    let mut signal = vec![false; params.n_rois + 1];
    for &r in &params.signal_rois {
        signal[usize::from(r)] = true;
    }

    let n_mdd = params.n_mdd();
    let mut labels: Vec<u8> = (0..params.n_subjects)
        .map(|i| u8::from(i < n_mdd))
        .collect();
    labels.shuffle(&mut stream(params.seed, "labels", 0));

    let subjects = labels
        .iter()
        .enumerate()
        .map(|(i, &label)| {
            let mut crng = stream(params.seed, "covariates", i as u64);
            let age: f64 = 38.0 + 12.0 * crng.sample::<f64, _>(StandardNormal);
            let mut covariates = BTreeMap::new();
            covariates.insert("age".to_string(), (age.clamp(18.0, 80.0) * 10.0).round() / 10.0);
            covariates.insert("sex".to_string(), f64::from(u8::from(crng.gen_bool(0.6))));
            let id = format!("sub-{i:04}");
            SubjectRecord {
                volume_path: format!("volumes/{id}.json"),
                id,
                label,
                site_id: crng.gen_range(0..params.n_sites),
                covariates,
            }
        })
        .collect();

    let manifest = DatasetManifest {
        subjects,
        atlas_path: Some("atlas.json".into()),
        seed: params.seed,
    };
    manifest.validate()?;
    Ok(SyntheticDataset {
        params: params.clone(),
        atlas,
        manifest,
        template,
        signal,
    })
}

fn synthesize_atlas(p: &SyntheticParams) -> Result<AtlasLabelMap> {
    let [nx, ny, nz] = p.dims;
    let center = p.dims.map(|d| (d as f64 - 1.0) / 2.0);
    let semi = p.dims.map(|d| 0.45 * d as f64);
    let mut mask = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let r: f64 = [x, y, z]
                    .iter()
                    .enumerate()
                    .map(|(a, &v)| ((v as f64 - center[a]) / semi[a]).powi(2))
                    .sum();
                if r <= 1.0 {
                    mask.push([x, y, z]);
                }
            }
        }
    }
    if mask.len() < p.n_rois * 8 {
        return Err(Error::Input(format!(
            "brain mask of {} voxels too small for {} ROIs",
            mask.len(),
            p.n_rois
        )));
    }

    // Centroids on distinct mask voxels, kept apart by a shrinking radius.
    let mut rng = stream(p.seed, "atlas", 0);
    let mut radius = 0.75 * (mask.len() as f64 / p.n_rois as f64).cbrt();
    let mut centroids: Vec<[f64; 3]> = Vec::with_capacity(p.n_rois);
    let mut failures = 0;
    while centroids.len() < p.n_rois {
        let v = mask[rng.gen_range(0..mask.len())].map(|c| c as f64);
        let far = centroids.iter().all(|c| dist2(c, &v) >= radius * radius);
        if far && !centroids.contains(&v) {
            centroids.push(v);
            failures = 0;
        } else {
            failures += 1;
            if failures > 200 {
                radius *= 0.9;
                failures = 0;
            }
        }
    }

    let mut labels = vec![0u16; nx * ny * nz];
    for v in &mask {
        let pos = v.map(|c| c as f64);
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, c) in centroids.iter().enumerate() {
            let d = dist2(c, &pos);
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        labels[v[0] + nx * (v[1] + ny * v[2])] = (best + 1) as u16;
    }
    AtlasLabelMap::new(p.dims, p.spacing, labels)
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum()
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.manifest.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.subjects.is_empty()
    }

    /// Synthesizes subject `index`.
    pub fn volume(&self, index: usize) -> Result<Volume3D> {
        let subject = self
            .manifest
            .subjects
            .get(index)
            .ok_or_else(|| Error::Input(format!("subject index {index} out of range")))?;
        let p = &self.params;
        let [nx, ny, nz] = p.dims;
        let mut rng = stream(p.seed, "subject", index as u64);

        let offsets: Vec<f64> = (0..=p.n_rois)
            .map(|_| p.roi_sd * rng.sample::<f64, _>(StandardNormal))
            .collect();

        let coarse_dims = p.dims.map(|d| ((d as f64 - 1.0) / p.field_scale).ceil() as usize + 2);
        let coarse: Vec<f64> = (0..coarse_dims.iter().product::<usize>())
            .map(|_| rng.sample(StandardNormal))
            .collect();
        let fetch = |x: i64, y: i64, z: i64| {
            let c = |v: i64, a: usize| v.clamp(0, coarse_dims[a] as i64 - 1) as usize;
            coarse[c(x, 0) + coarse_dims[0] * (c(y, 1) + coarse_dims[1] * c(z, 2))]
        };

        let labels = self.atlas.labels();
        let mut field = vec![0.0f64; labels.len()];
        let (mut sum, mut sum2, mut count) = (0.0, 0.0, 0usize);
        let inv = 1.0 / p.field_scale;
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let i = x + nx * (y + ny * z);
                    if labels[i] == 0 {
                        continue;
                    }
                    let f = sample_trilinear(fetch, x as f64 * inv, y as f64 * inv, z as f64 * inv);
                    field[i] = f;
                    sum += f;
                    sum2 += f * f;
                    count += 1;
                }
            }
        }
        let mean = sum / count as f64;
        let sd = (sum2 / count as f64 - mean * mean).max(1e-12).sqrt();

        let shift = if subject.label == 1 { p.effect_size } else { 0.0 };
        let data = labels
            .iter()
            .zip(&field)
            .map(|(&l, &f)| {
                if l == 0 {
                    return 0.0;
                }
                let l = usize::from(l);
                let noise: f64 = rng.sample(StandardNormal);
                let mut v = self.template[l] + offsets[l] + (f - mean) / sd + p.noise_sd * noise;
                if self.signal[l] {
                    v += shift;
                }
                v as f32
            })
            .collect();
        Volume3D::new(p.dims, p.spacing, data)
    }

    /// Writes `manifest.json`, the atlas and every volume under `out_dir`.
    pub fn write(&self, out_dir: &Path) -> Result<PathBuf> {
        let atlas_rel = self.manifest.atlas_path.as_deref().unwrap_or("atlas.json");
        save_atlas(&self.atlas, &out_dir.join(atlas_rel))?;
        for (i, s) in self.manifest.subjects.iter().enumerate() {
            save_volume(&self.volume(i)?, &out_dir.join(&s.volume_path))?;
        }
        let manifest_path = out_dir.join("manifest.json");
        write_json(&manifest_path, &self.manifest)?;
        Ok(manifest_path)
    }
}

impl VolumeSource for SyntheticDataset {
    fn subjects(&self) -> &[SubjectRecord] {
        &self.manifest.subjects
    }

    fn atlas(&self) -> Option<&AtlasLabelMap> {
        Some(&self.atlas)
    }

    fn load(&self, index: usize) -> Result<Volume3D> {
        self.volume(index)
    }
}
