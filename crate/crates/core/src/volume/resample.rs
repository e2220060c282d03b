use super::{Dims, Volume3D};
use crate::error::{Error, Result};

/// Trilinear sample at continuous voxel coordinates. `fetch` returns the
/// value of an integer voxel and decides how out-of-range voxels behave.
#[inline]
pub fn sample_trilinear(fetch: impl Fn(i64, i64, i64) -> f64, x: f64, y: f64, z: f64) -> f64 {
    let (x0, y0, z0) = (x.floor(), y.floor(), z.floor());
    let (fx, fy, fz) = (x - x0, y - y0, z - z0);
    let (ix, iy, iz) = (x0 as i64, y0 as i64, z0 as i64);
    let mut acc = 0.0;
    for (dz, wz) in [(0, 1.0 - fz), (1, fz)] {
        if wz == 0.0 {
            continue;
        }
        for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
            if wy == 0.0 {
                continue;
            }
            for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
                if wx == 0.0 {
                    continue;
                }
                acc += wx * wy * wz * fetch(ix + dx, iy + dy, iz + dz);
            }
        }
    }
    acc
}

/// Corner-aligned trilinear resampling: output voxel `i` samples input
/// coordinate `i·(in−1)/(out−1)` on each axis.
pub fn resize_trilinear(vol: &Volume3D, new_dims: Dims) -> Result<Volume3D> {
    if new_dims.iter().any(|&d| d < 2) {
        return Err(Error::Input(format!(
            "resize target extents must all be >= 2, got {new_dims:?}"
        )));
    }
    let dims = vol.dims();
    let scale: Vec<f64> = (0..3)
        .map(|a| (dims[a] as f64 - 1.0) / (new_dims[a] as f64 - 1.0))
        .collect();
    let fetch = |x: i64, y: i64, z: i64| {
        let cx = x.clamp(0, dims[0] as i64 - 1) as usize;
        let cy = y.clamp(0, dims[1] as i64 - 1) as usize;
        let cz = z.clamp(0, dims[2] as i64 - 1) as usize;
        f64::from(vol.get(cx, cy, cz))
    };
    let mut data = Vec::with_capacity(new_dims.iter().product());
    for k in 0..new_dims[2] {
        let z = k as f64 * scale[2];
        for j in 0..new_dims[1] {
            let y = j as f64 * scale[1];
            for i in 0..new_dims[0] {
                let x = i as f64 * scale[0];
                data.push(sample_trilinear(fetch, x, y, z) as f32);
            }
        }
    }
    let spacing = std::array::from_fn(|a| vol.spacing()[a] * scale[a]);
    Volume3D::new(new_dims, spacing, data)
}
