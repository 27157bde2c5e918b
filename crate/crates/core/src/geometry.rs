//! RAS <-> voxel conversion and crop/pad into a model's input window.
//!
//! The window bookkeeping lives in [`RegionMap`]: model-space voxel `m`
//! corresponds to source voxel `m + offset`, so a negative offset means the
//! window hangs off the low edge of the source and is padded there.

use serde::{Deserialize, Serialize};

use crate::volume::{linear_index, LogitVolume, Volume, VoxelData};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GeometryError {
    #[error("affine is singular")]
    SingularAffine,
    #[error("point {point:?} maps to voxel {index:?}, outside volume dims {dims:?}")]
    OutOfBounds {
        point: [f64; 3],
        index: [f64; 3],
        dims: [usize; 3],
    },
    #[error("non-finite coordinate in {0:?}")]
    NonFinite([f64; 3]),
    #[error("prompt bounding box {extent:?} exceeds model input {target:?}")]
    PromptsUnfittable { extent: [usize; 3], target: [usize; 3] },
    #[error("at least one prompt is required")]
    NoPrompts,
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
}

/// Homogeneous 4x4 voxel-to-RAS transform (row-major).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Affine(pub [[f64; 4]; 4]);

impl Default for Affine {
    fn default() -> Self {
        Self::identity()
    }
}

impl Affine {
    pub fn identity() -> Self {
        Self::diag([1.0, 1.0, 1.0])
    }

    pub fn diag(d: [f64; 3]) -> Self {
        let mut m = [[0.0; 4]; 4];
        m[0][0] = d[0];
        m[1][1] = d[1];
        m[2][2] = d[2];
        m[3][3] = 1.0;
        Self(m)
    }

    /// From the three NIfTI `srow_*` rows; the last row is fixed to `[0 0 0 1]`.
    pub fn from_rows(rows: [[f64; 4]; 3]) -> Self {
        Self([rows[0], rows[1], rows[2], [0.0, 0.0, 0.0, 1.0]])
    }

    /// Determinant of the upper-left 3x3 block.
    pub fn det3(&self) -> f64 {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// Inverse of the affine map, or `None` when the linear part is singular
    /// or the bottom row is not `[0 0 0 1]`.
    pub fn inverse(&self) -> Option<Affine> {
        let m = &self.0;
        if m[3] != [0.0, 0.0, 0.0, 1.0] {
            return None;
        }
        let det = self.det3();
        if det == 0.0 || !det.is_finite() {
            return None;
        }
        let inv_det = 1.0 / det;
        // adjugate of the 3x3 block
        let mut r = [[0.0; 3]; 3];
        r[0][0] = (m[1][1] * m[2][2] - m[1][2] * m[2][1]) * inv_det;
        r[0][1] = (m[0][2] * m[2][1] - m[0][1] * m[2][2]) * inv_det;
        r[0][2] = (m[0][1] * m[1][2] - m[0][2] * m[1][1]) * inv_det;
        r[1][0] = (m[1][2] * m[2][0] - m[1][0] * m[2][2]) * inv_det;
        r[1][1] = (m[0][0] * m[2][2] - m[0][2] * m[2][0]) * inv_det;
        r[1][2] = (m[0][2] * m[1][0] - m[0][0] * m[1][2]) * inv_det;
        r[2][0] = (m[1][0] * m[2][1] - m[1][1] * m[2][0]) * inv_det;
        r[2][1] = (m[0][1] * m[2][0] - m[0][0] * m[2][1]) * inv_det;
        r[2][2] = (m[0][0] * m[1][1] - m[0][1] * m[1][0]) * inv_det;
        let t = [m[0][3], m[1][3], m[2][3]];
        let mut out = [[0.0; 4]; 4];
        for row in 0..3 {
            out[row][..3].copy_from_slice(&r[row]);
            out[row][3] = -(r[row][0] * t[0] + r[row][1] * t[1] + r[row][2] * t[2]);
        }
        out[3][3] = 1.0;
        let inv = Affine(out);
        inv.0.iter().flatten().all(|x| x.is_finite()).then_some(inv)
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let m = &self.0;
        let mut out = [0.0; 3];
        for (row, o) in out.iter_mut().enumerate() {
            *o = m[row][0] * p[0] + m[row][1] * p[1] + m[row][2] * p[2] + m[row][3];
        }
        out
    }
}

/// Physical point in millimetres, RAS convention.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RasPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl RasPoint {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VoxelIndex {
    pub i: usize,
    pub j: usize,
    pub k: usize,
}

impl VoxelIndex {
    pub const fn new(i: usize, j: usize, k: usize) -> Self {
        Self { i, j, k }
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.i, self.j, self.k]
    }

    pub fn from_array(a: [usize; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn in_bounds(&self, dims: [usize; 3]) -> bool {
        self.i < dims[0] && self.j < dims[1] && self.k < dims[2]
    }

    pub fn linear(&self, dims: [usize; 3]) -> usize {
        linear_index(dims, self.i, self.j, self.k)
    }
}

/// Convert a RAS point to the nearest voxel of a volume with `dims`.
///
/// Rounds half away from zero (`f64::round`).
pub fn ras_to_voxel(p: RasPoint, affine: &Affine, dims: [usize; 3]) -> Result<VoxelIndex, GeometryError> {
    if !p.is_finite() {
        return Err(GeometryError::NonFinite(p.as_array()));
    }
    let inv = affine.inverse().ok_or(GeometryError::SingularAffine)?;
    let c = inv.apply(p.as_array()).map(f64::round);
    let in_range = c.iter().zip(dims).all(|(&x, d)| x >= 0.0 && x < d as f64);
    if !in_range {
        return Err(GeometryError::OutOfBounds {
            point: p.as_array(),
            index: c,
            dims,
        });
    }
    Ok(VoxelIndex::new(c[0] as usize, c[1] as usize, c[2] as usize))
}

pub fn voxel_to_ras(v: VoxelIndex, affine: &Affine) -> RasPoint {
    let [x, y, z] = affine.apply(v.as_array().map(|c| c as f64));
    RasPoint::new(x, y, z)
}

/// Saved crop/pad window: model voxel `m` <-> source voxel `m + offset`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionMap {
    pub offset: [i64; 3],
    pub dims: [usize; 3],
    pub pad_value: f64,
}

impl RegionMap {
    /// Identity window over a volume of `dims`.
    pub fn identity(dims: [usize; 3], pad_value: f64) -> Self {
        Self {
            offset: [0; 3],
            dims,
            pad_value,
        }
    }

    /// Window geometry only, suitable as a cache key.
    pub fn key(&self) -> ([i64; 3], [usize; 3]) {
        (self.offset, self.dims)
    }

    /// Source voxel for model voxel `m`, if it lies inside `source_dims`.
    #[inline]
    pub fn to_source(&self, m: [usize; 3], source_dims: [usize; 3]) -> Option<[usize; 3]> {
        let mut out = [0usize; 3];
        for a in 0..3 {
            let s = m[a] as i64 + self.offset[a];
            if s < 0 || s >= source_dims[a] as i64 {
                return None;
            }
            out[a] = s as usize;
        }
        Some(out)
    }

    /// Whether a source voxel falls inside the window.
    pub fn contains_source(&self, v: VoxelIndex) -> bool {
        let v = v.as_array();
        (0..3).all(|a| {
            let m = v[a] as i64 - self.offset[a];
            m >= 0 && m < self.dims[a] as i64
        })
    }
}

/// Choose the model window for a set of prompts and crop/pad the volume into it.
///
/// On axes longer than the target the window is centred on the integer
/// centroid (floor of the mean) of the prompts, then clamped so that it keeps
/// every prompt inside and stays within the source. On axes that fit, the
/// source is centred in the window. Voxels outside the source take the
/// volume minimum.
pub fn fit_to_model(
    volume: &Volume,
    prompts: &[VoxelIndex],
    target: [usize; 3],
) -> Result<(Volume, RegionMap), GeometryError> {
    let map = plan_window(volume.dims(), prompts, target)?;
    let pad = volume.range().0;
    let cropped = crop(
        volume,
        &RegionMap {
            pad_value: pad,
            ..map
        },
    );
    Ok((
        cropped,
        RegionMap {
            pad_value: pad,
            ..map
        },
    ))
}

/// Window placement without touching voxel data.
pub fn plan_window(
    dims: [usize; 3],
    prompts: &[VoxelIndex],
    target: [usize; 3],
) -> Result<RegionMap, GeometryError> {
    if target.contains(&0) {
        return Err(GeometryError::DimMismatch(format!(
            "zero-extent model input {target:?}"
        )));
    }
    if prompts.is_empty() {
        return Err(GeometryError::NoPrompts);
    }
    for p in prompts {
        if !p.in_bounds(dims) {
            let idx = p.as_array().map(|c| c as f64);
            return Err(GeometryError::OutOfBounds {
                point: idx,
                index: idx,
                dims,
            });
        }
    }
    let mut offset = [0i64; 3];
    let mut extent = [0usize; 3];
    for a in 0..3 {
        let coords = prompts.iter().map(|p| p.as_array()[a] as i64);
        let lo_p = coords.clone().min().unwrap();
        let hi_p = coords.clone().max().unwrap();
        extent[a] = (hi_p - lo_p + 1) as usize;
        if extent[a] > target[a] {
            continue;
        }
        let n = prompts.len() as i64;
        let centroid = coords.sum::<i64>().div_euclid(n);
        let t = target[a] as i64;
        let d = dims[a] as i64;
        if d <= t {
            // The whole axis fits, so every placement overlaps fully; pin the
            // window so it does not move as prompts are added.
            offset[a] = (d - t).div_euclid(2);
            continue;
        }
        let start = centroid - t / 2;
        let lo = 0.max(hi_p - t + 1);
        let hi = (d - t).min(lo_p);
        offset[a] = start.clamp(lo, hi);
    }
    if extent.iter().zip(target).any(|(&e, t)| e > t) {
        return Err(GeometryError::PromptsUnfittable { extent, target });
    }
    Ok(RegionMap {
        offset,
        dims: target,
        pad_value: 0.0,
    })
}

/// Extract the window described by `map`, padding with `map.pad_value`.
pub fn crop(volume: &Volume, map: &RegionMap) -> Volume {
    let src = volume.dims();
    let out = map.dims;
    let data = match volume.data() {
        VoxelData::I16(v) => VoxelData::I16(crop_slice(v, src, map, map.pad_value as i16)),
        VoxelData::F32(v) => VoxelData::F32(crop_slice(v, src, map, map.pad_value as f32)),
    };
    // the window shares the source's voxel spacing; translate the origin
    let mut affine = *volume.affine();
    let shift = volume.affine().apply(map.offset.map(|o| o as f64));
    for (row, s) in shift.iter().enumerate() {
        affine.0[row][3] = *s;
    }
    debug_assert_eq!(data.len(), out.iter().product::<usize>());
    Volume::new(out, data, affine).expect("window of a valid volume is valid")
}

fn crop_slice<T: Copy>(src: &[T], src_dims: [usize; 3], map: &RegionMap, pad: T) -> Vec<T> {
    let [tx, ty, tz] = map.dims;
    let mut out = vec![pad; tx * ty * tz];
    // Valid x-run per row: model x in [x0, x1)
    let ox = map.offset[0];
    let x0 = (-ox).clamp(0, tx as i64) as usize;
    let x1 = (src_dims[0] as i64 - ox).clamp(0, tx as i64) as usize;
    if x0 >= x1 {
        return out;
    }
    for k in 0..tz {
        let sk = k as i64 + map.offset[2];
        if sk < 0 || sk >= src_dims[2] as i64 {
            continue;
        }
        for j in 0..ty {
            let sj = j as i64 + map.offset[1];
            if sj < 0 || sj >= src_dims[1] as i64 {
                continue;
            }
            let dst = linear_index(map.dims, x0, j, k);
            let s = linear_index(src_dims, (x0 as i64 + ox) as usize, sj as usize, sk as usize);
            out[dst..dst + (x1 - x0)].copy_from_slice(&src[s..s + (x1 - x0)]);
        }
    }
    out
}

/// Source-space index to model space. The caller guarantees the voxel lies in
/// the window (true for every prompt passed to a successful [`fit_to_model`]).
pub fn map_prompt(v: VoxelIndex, map: &RegionMap) -> VoxelIndex {
    let a = v.as_array();
    let m: [usize; 3] = std::array::from_fn(|ax| {
        let c = a[ax] as i64 - map.offset[ax];
        debug_assert!(c >= 0 && c < map.dims[ax] as i64, "prompt outside window");
        c as usize
    });
    VoxelIndex::from_array(m)
}

/// Model-space index back to source space.
pub fn unmap_prompt(m: VoxelIndex, map: &RegionMap) -> VoxelIndex {
    let a = m.as_array();
    VoxelIndex::from_array(std::array::from_fn(|ax| (a[ax] as i64 + map.offset[ax]) as usize))
}

/// Place model-space logits back at their source coordinates.
///
/// Voxels the window does not cover get `background`.
pub fn restore_mask(
    logits: &LogitVolume,
    map: &RegionMap,
    original_dims: [usize; 3],
    background: f64,
) -> Result<LogitVolume, GeometryError> {
    if logits.dims != map.dims {
        return Err(GeometryError::DimMismatch(format!(
            "logits {:?} vs window {:?}",
            logits.dims, map.dims
        )));
    }
    let mut out = LogitVolume::filled(original_dims, background);
    place_into(&mut out, logits, map);
    Ok(out)
}

/// Overwrite the window's footprint in `dest` with `logits`.
pub fn place_into(dest: &mut LogitVolume, logits: &LogitVolume, map: &RegionMap) {
    let src_dims = dest.dims;
    let [tx, ty, tz] = map.dims;
    let ox = map.offset[0];
    let x0 = (-ox).clamp(0, tx as i64) as usize;
    let x1 = (src_dims[0] as i64 - ox).clamp(0, tx as i64) as usize;
    if x0 >= x1 {
        return;
    }
    for k in 0..tz {
        let sk = k as i64 + map.offset[2];
        if sk < 0 || sk >= src_dims[2] as i64 {
            continue;
        }
        for j in 0..ty {
            let sj = j as i64 + map.offset[1];
            if sj < 0 || sj >= src_dims[1] as i64 {
                continue;
            }
            let m = linear_index(map.dims, x0, j, k);
            let s = linear_index(src_dims, (x0 as i64 + ox) as usize, sj as usize, sk as usize);
            dest.values[s..s + (x1 - x0)].copy_from_slice(&logits.values[m..m + (x1 - x0)]);
        }
    }
}

/// Cut the window's footprint out of a source-space field (used to bring the
/// previous working logits into model space).
pub fn crop_field(field: &LogitVolume, map: &RegionMap, fill: f64) -> LogitVolume {
    let mut out = LogitVolume::filled(map.dims, fill);
    let src_dims = field.dims;
    let [tx, ty, tz] = map.dims;
    let ox = map.offset[0];
    let x0 = (-ox).clamp(0, tx as i64) as usize;
    let x1 = (src_dims[0] as i64 - ox).clamp(0, tx as i64) as usize;
    if x0 >= x1 {
        return out;
    }
    for k in 0..tz {
        let sk = k as i64 + map.offset[2];
        if sk < 0 || sk >= src_dims[2] as i64 {
            continue;
        }
        for j in 0..ty {
            let sj = j as i64 + map.offset[1];
            if sj < 0 || sj >= src_dims[1] as i64 {
                continue;
            }
            let m = linear_index(map.dims, x0, j, k);
            let s = linear_index(src_dims, (x0 as i64 + ox) as usize, sj as usize, sk as usize);
            out.values[m..m + (x1 - x0)].copy_from_slice(&field.values[s..s + (x1 - x0)]);
        }
    }
    out
}
