//! Turning a subject volume into an ordered set of uniform cubic patches,
//! either one per atlas ROI or one per cell of a fixed cube grid.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::io::{f32_to_bytes, read_f32_payload, read_json, write_bytes, write_json};
use crate::volume::{payload_path, resize_trilinear, sample_trilinear, AtlasLabelMap, Dims, Volume3D};

pub const DEFAULT_PATCH_SIDE: usize = 32;

/// Working dims cube extraction resizes to before partitioning.
pub const DEFAULT_WORKING_DIMS: Dims = [120, 140, 120];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Atlas,
    Cube,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Atlas => "atlas",
            Strategy::Cube => "cube",
        })
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "atlas" => Ok(Strategy::Atlas),
            "cube" => Ok(Strategy::Cube),
            _ => Err(Error::Config(format!("unknown strategy {s:?}, expected atlas or cube"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractionOptions {
    pub patch_side: usize,
    /// Zero voxels of the bounding cube that lie outside the ROI.
    pub mask_to_roi: bool,
}

impl Default for ExtractionOptions {
    fn default() -> Self {
        ExtractionOptions {
            patch_side: DEFAULT_PATCH_SIDE,
            mask_to_roi: false,
        }
    }
}

/// Inclusive axis-aligned voxel box.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundingBox {
    pub min: [usize; 3],
    pub max: [usize; 3],
}

impl BoundingBox {
    fn point(p: [usize; 3]) -> Self {
        BoundingBox { min: p, max: p }
    }

    fn include(&mut self, p: [usize; 3]) {
        for a in 0..3 {
            self.min[a] = self.min[a].min(p[a]);
            self.max[a] = self.max[a].max(p[a]);
        }
    }

    pub fn extent(&self) -> [usize; 3] {
        std::array::from_fn(|a| self.max[a] - self.min[a] + 1)
    }
}

/// Ordered patches of one subject; `data` holds `n` patches back to back,
/// each `patch_side³` values, x-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    pub subject_id: String,
    pub strategy: Strategy,
    pub patch_side: usize,
    pub region_ids: Vec<u32>,
    data: Vec<f32>,
}

impl PatchSet {
    pub fn new(
        subject_id: impl Into<String>,
        strategy: Strategy,
        patch_side: usize,
        region_ids: Vec<u32>,
        data: Vec<f32>,
    ) -> Result<Self> {
        let len = patch_side.pow(3);
        if patch_side == 0 || region_ids.is_empty() || data.len() != region_ids.len() * len {
            return Err(Error::Dimension(format!(
                "{} regions of side {patch_side} need {} values, got {}",
                region_ids.len(),
                region_ids.len() * len,
                data.len()
            )));
        }
        Ok(PatchSet {
            subject_id: subject_id.into(),
            strategy,
            patch_side,
            region_ids,
            data,
        })
    }

    pub fn n(&self) -> usize {
        self.region_ids.len()
    }

    pub fn patch_len(&self) -> usize {
        self.patch_side.pow(3)
    }

    pub fn patch(&self, i: usize) -> &[f32] {
        let len = self.patch_len();
        &self.data[i * len..(i + 1) * len]
    }

    /// All patches as one row-major `n × patch_len` matrix.
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(
            path,
            &PatchHeader {
                subject_id: self.subject_id.clone(),
                strategy: self.strategy,
                n: self.n(),
                region_ids: self.region_ids.clone(),
            },
        )?;
        write_bytes(&payload_path(path), &f32_to_bytes(&self.data))
    }

    /// Loads an export; the patch side is recovered from the payload size.
    pub fn load(path: &Path) -> Result<Self> {
        let h: PatchHeader = read_json(path)?;
        if h.n != h.region_ids.len() || h.n == 0 {
            return Err(Error::format(path, 0, "n does not match region_ids"));
        }
        let payload = payload_path(path);
        let bytes = std::fs::metadata(&payload)
            .map_err(|e| Error::io(&payload, e))?
            .len() as usize;
        let per_patch = bytes / 4 / h.n;
        let side = (per_patch as f64).cbrt().round() as usize;
        if side == 0 || side.pow(3) * h.n * 4 != bytes {
            return Err(Error::format(
                &payload,
                bytes as u64,
                format!("payload of {bytes} bytes is not {} cubic patches", h.n),
            ));
        }
        let data = read_f32_payload(&payload, side.pow(3) * h.n)?;
        PatchSet::new(h.subject_id, h.strategy, side, h.region_ids, data)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PatchHeader {
    subject_id: String,
    strategy: Strategy,
    n: usize,
    region_ids: Vec<u32>,
}

/// Tightest box around every voxel carrying `label`.
pub fn roi_bounding_box(atlas: &AtlasLabelMap, label: u16) -> Result<BoundingBox> {
    let [nx, ny, nz] = atlas.dims();
    let mut bbox: Option<BoundingBox> = None;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if atlas.get(x, y, z) == label {
                    match bbox.as_mut() {
                        Some(b) => b.include([x, y, z]),
                        None => bbox = Some(BoundingBox::point([x, y, z])),
                    }
                }
            }
        }
    }
    bbox.ok_or_else(|| Error::Input(format!("label {label} does not occur in the atlas")))
}

/// Boxes of labels `1..=roi_count` in one pass.
fn all_bounding_boxes(atlas: &AtlasLabelMap) -> Vec<Option<BoundingBox>> {
    let [nx, ny, nz] = atlas.dims();
    let mut boxes: Vec<Option<BoundingBox>> = vec![None; atlas.roi_count() + 1];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let l = usize::from(atlas.get(x, y, z));
                if l == 0 {
                    continue;
                }
                match boxes[l].as_mut() {
                    Some(b) => b.include([x, y, z]),
                    None => boxes[l] = Some(BoundingBox::point([x, y, z])),
                }
            }
        }
    }
    boxes
}

/// One patch per ROI, in ascending label order.
///
/// The ROI box is grown to a cube of side `max(extent)` about its center and
/// trilinearly resampled (corner-aligned) to `patch_side³`. Cube voxels
/// outside the volume read as zero.
pub fn extract_atlas_patches(
    vol: &Volume3D,
    atlas: &AtlasLabelMap,
    subject_id: &str,
    opts: &ExtractionOptions,
) -> Result<PatchSet> {
    if vol.dims() != atlas.dims() {
        return Err(Error::Input(format!(
            "volume dims {:?} differ from atlas dims {:?}",
            vol.dims(),
            atlas.dims()
        )));
    }
    let p = opts.patch_side;
    if p == 0 {
        return Err(Error::Input("patch_side must be positive".into()));
    }
    let dims = vol.dims();
    let boxes = all_bounding_boxes(atlas);
    let mut data = Vec::with_capacity(atlas.roi_count() * p.pow(3));
    let mut region_ids = Vec::with_capacity(atlas.roi_count());

    for (label, bbox) in boxes.iter().enumerate().skip(1) {
        let bbox = bbox.expect("atlas invariant: every label occurs");
        let side = *bbox.extent().iter().max().expect("3 axes");
        let step = if p > 1 {
            (side as f64 - 1.0) / (p as f64 - 1.0)
        } else {
            0.0
        };
        let start: [f64; 3] = std::array::from_fn(|a| {
            let center = (bbox.min[a] + bbox.max[a]) as f64 / 2.0;
            if p > 1 {
                center - (side as f64 - 1.0) / 2.0
            } else {
                center
            }
        });
        let fetch = |x: i64, y: i64, z: i64| {
            if x < 0
                || y < 0
                || z < 0
                || x >= dims[0] as i64
                || y >= dims[1] as i64
                || z >= dims[2] as i64
            {
                return 0.0;
            }
            let (x, y, z) = (x as usize, y as usize, z as usize);
            if opts.mask_to_roi && usize::from(atlas.get(x, y, z)) != label {
                return 0.0;
            }
            f64::from(vol.get(x, y, z))
        };
        for k in 0..p {
            let z = start[2] + k as f64 * step;
            for j in 0..p {
                let y = start[1] + j as f64 * step;
                for i in 0..p {
                    let x = start[0] + i as f64 * step;
                    data.push(sample_trilinear(fetch, x, y, z) as f32);
                }
            }
        }
        region_ids.push(label as u32);
    }
    PatchSet::new(subject_id, Strategy::Atlas, p, region_ids, data)
}

/// Number of grid cells along each axis.
pub fn cube_grid(dims: Dims, patch_side: usize) -> [usize; 3] {
    dims.map(|d| d / patch_side)
}

/// Non-overlapping cubes on an origin-anchored grid; trailing voxels beyond
/// the last full cube are dropped. Region id of cell `(ix, iy, iz)` is
/// `(ix·gy + iy)·gz + iz`.
pub fn extract_cube_patches(
    vol: &Volume3D,
    subject_id: &str,
    opts: &ExtractionOptions,
) -> Result<PatchSet> {
    let p = opts.patch_side;
    let dims = vol.dims();
    if p == 0 || dims.iter().any(|&d| d < p) {
        return Err(Error::Input(format!(
            "every extent of {dims:?} must be at least the patch side {p}"
        )));
    }
    let grid = cube_grid(dims, p);
    let n = grid.iter().product::<usize>();
    let mut data = Vec::with_capacity(n * p.pow(3));
    let mut region_ids = Vec::with_capacity(n);
    for ix in 0..grid[0] {
        for iy in 0..grid[1] {
            for iz in 0..grid[2] {
                for z in 0..p {
                    for y in 0..p {
                        let row = vol.index(ix * p, iy * p + y, iz * p + z);
                        data.extend_from_slice(&vol.data()[row..row + p]);
                    }
                }
                region_ids.push(((ix * grid[1] + iy) * grid[2] + iz) as u32);
            }
        }
    }
    PatchSet::new(subject_id, Strategy::Cube, p, region_ids, data)
}

/// Runs the configured strategy on one subject. Cube extraction first
/// resizes to `working_dims` when the volume has other dims.
pub fn extract_subject(
    vol: &Volume3D,
    atlas: Option<&AtlasLabelMap>,
    subject_id: &str,
    strategy: Strategy,
    working_dims: Dims,
    opts: &ExtractionOptions,
) -> Result<PatchSet> {
    match strategy {
        Strategy::Atlas => {
            let atlas = atlas
                .ok_or_else(|| Error::Config("atlas strategy requires an atlas".into()))?;
            extract_atlas_patches(vol, atlas, subject_id, opts)
        }
        Strategy::Cube if vol.dims() == working_dims => extract_cube_patches(vol, subject_id, opts),
        Strategy::Cube => {
            extract_cube_patches(&resize_trilinear(vol, working_dims)?, subject_id, opts)
        }
    }
}

/// Patch count a strategy yields for the given geometry.
pub fn expected_patch_count(
    strategy: Strategy,
    atlas: Option<&AtlasLabelMap>,
    working_dims: Dims,
    patch_side: usize,
) -> Option<usize> {
    match strategy {
        Strategy::Atlas => atlas.map(AtlasLabelMap::roi_count),
        Strategy::Cube => Some(cube_grid(working_dims, patch_side).iter().product()),
    }
}
