//! In-memory scalar volumes.
//!
//! Voxels are stored x-fastest (`i + nx * (j + ny * k)`), matching the NIfTI
//! on-disk order so loading never has to transpose.

use sha2::{Digest, Sha256};
use std::fmt;

use crate::geometry::Affine;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum VolumeError {
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("affine is singular (determinant {0})")]
    SingularAffine(f64),
}

/// Element type of a volume's voxel payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElementType {
    I16,
    F32,
}

impl ElementType {
    pub const fn byte_size(self) -> usize {
        match self {
            Self::I16 => 2,
            Self::F32 => 4,
        }
    }
}

/// Voxel payload in one of the two supported element types.
#[derive(Debug, Clone, PartialEq)]
pub enum VoxelData {
    I16(Vec<i16>),
    F32(Vec<f32>),
}

impl VoxelData {
    pub fn len(&self) -> usize {
        match self {
            Self::I16(v) => v.len(),
            Self::F32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn element_type(&self) -> ElementType {
        match self {
            Self::I16(_) => ElementType::I16,
            Self::F32(_) => ElementType::F32,
        }
    }

    #[inline]
    pub fn get(&self, idx: usize) -> f64 {
        match self {
            Self::I16(v) => f64::from(v[idx]),
            Self::F32(v) => f64::from(v[idx]),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        match self {
            Self::I16(v) => v.iter().map(|&x| f64::from(x)).collect(),
            Self::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
        }
    }

    /// Little-endian byte image of the payload.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        match self {
            Self::I16(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            Self::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        }
    }

    pub fn from_le_bytes(ty: ElementType, bytes: &[u8]) -> Option<Self> {
        if bytes.len() % ty.byte_size() != 0 {
            return None;
        }
        Some(match ty {
            ElementType::I16 => Self::I16(
                bytes
                    .chunks_exact(2)
                    .map(|c| i16::from_le_bytes([c[0], c[1]]))
                    .collect(),
            ),
            ElementType::F32 => Self::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            ),
        })
    }

    fn min_max(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for i in 0..self.len() {
            let v = self.get(i);
            if v.is_finite() {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        if lo > hi {
            (0.0, 0.0)
        } else {
            (lo, hi)
        }
    }
}

/// SHA-256 digest of a volume's geometry and payload.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct ContentHash(pub [u8; 32]);

impl ContentHash {
    pub fn short(&self) -> u64 {
        u64::from_le_bytes(self.0[..8].try_into().unwrap())
    }
}

impl fmt::Display for ContentHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.0 {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

impl fmt::Debug for ContentHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ContentHash({self})")
    }
}

/// A 3D scalar grid with its voxel-to-RAS affine.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    data: VoxelData,
    affine: Affine,
    range: (f64, f64),
}

impl Volume {
    pub fn new(dims: [usize; 3], data: VoxelData, affine: Affine) -> Result<Self, VolumeError> {
        if dims.contains(&0) {
            return Err(VolumeError::DimMismatch(format!("zero-extent dims {dims:?}")));
        }
        let expected = dims.iter().product::<usize>();
        if data.len() != expected {
            return Err(VolumeError::DimMismatch(format!(
                "dims {dims:?} need {expected} voxels, payload has {}",
                data.len()
            )));
        }
        let det = affine.det3();
        if det == 0.0 || !det.is_finite() {
            return Err(VolumeError::SingularAffine(det));
        }
        let range = data.min_max();
        Ok(Self {
            dims,
            data,
            affine,
            range,
        })
    }

    /// Build a float volume from `f(i, j, k)`.
    pub fn from_fn(
        dims: [usize; 3],
        affine: Affine,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self, VolumeError> {
        let mut data = Vec::with_capacity(dims.iter().product());
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    data.push(f(i, j, k));
                }
            }
        }
        Self::new(dims, VoxelData::F32(data), affine)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &VoxelData {
        &self.data
    }

    pub fn into_data(self) -> VoxelData {
        self.data
    }

    pub fn element_type(&self) -> ElementType {
        self.data.element_type()
    }

    pub fn affine(&self) -> &Affine {
        &self.affine
    }

    /// Cached (min, max) over finite voxels.
    pub fn range(&self) -> (f64, f64) {
        self.range
    }

    #[inline]
    pub fn linear_index(&self, i: usize, j: usize, k: usize) -> usize {
        linear_index(self.dims, i, j, k)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data.get(self.linear_index(i, j, k))
    }

    #[inline]
    pub fn get_linear(&self, idx: usize) -> f64 {
        self.data.get(idx)
    }

    pub fn content_hash(&self) -> ContentHash {
        let mut h = Sha256::new();
        for d in self.dims {
            h.update((d as u64).to_le_bytes());
        }
        h.update([match self.element_type() {
            ElementType::I16 => 4u8,
            ElementType::F32 => 16u8,
        }]);
        let mut buf = Vec::with_capacity(16 * 1024);
        match &self.data {
            VoxelData::I16(v) => {
                for chunk in v.chunks(4096) {
                    buf.clear();
                    buf.extend(chunk.iter().flat_map(|x| x.to_le_bytes()));
                    h.update(&buf);
                }
            }
            VoxelData::F32(v) => {
                for chunk in v.chunks(4096) {
                    buf.clear();
                    buf.extend(chunk.iter().flat_map(|x| x.to_le_bytes()));
                    h.update(&buf);
                }
            }
        }
        for row in &self.affine.0 {
            for x in row {
                h.update(x.to_le_bytes());
            }
        }
        ContentHash(h.finalize().into())
    }
}

#[inline]
pub fn linear_index(dims: [usize; 3], i: usize, j: usize, k: usize) -> usize {
    i + dims[0] * (j + dims[1] * k)
}

/// Inverse of [`linear_index`].
#[inline]
pub fn unravel(dims: [usize; 3], idx: usize) -> [usize; 3] {
    let i = idx % dims[0];
    let rest = idx / dims[0];
    [i, rest % dims[1], rest / dims[1]]
}

/// Axis-aligned slice geometry: `(width, height, linear indices)`.
///
/// The two remaining axes keep their order; the lower one is the width and
/// runs fastest. Returns `None` for a bad axis or index.
pub fn slice_indices(dims: [usize; 3], axis: usize, index: usize) -> Option<(usize, usize, Vec<usize>)> {
    if axis > 2 || index >= dims[axis] {
        return None;
    }
    let (u, v) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let (w, h) = (dims[u], dims[v]);
    let mut out = Vec::with_capacity(w * h);
    let mut c = [0usize; 3];
    c[axis] = index;
    for y in 0..h {
        c[v] = y;
        for x in 0..w {
            c[u] = x;
            out.push(linear_index(dims, c[0], c[1], c[2]));
        }
    }
    Some((w, h, out))
}

/// A dense per-voxel field over a 3D grid (logits, masks, uncertainty).
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    pub dims: [usize; 3],
    pub values: Vec<T>,
}

impl<T: Copy> Grid<T> {
    pub fn filled(dims: [usize; 3], value: T) -> Self {
        Self {
            dims,
            values: vec![value; dims.iter().product()],
        }
    }

    pub fn from_vec(dims: [usize; 3], values: Vec<T>) -> Result<Self, VolumeError> {
        let n: usize = dims.iter().product();
        if n != values.len() || n == 0 {
            return Err(VolumeError::DimMismatch(format!(
                "dims {dims:?} need {n} values, got {}",
                values.len()
            )));
        }
        Ok(Self { dims, values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> T {
        self.values[linear_index(self.dims, i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: T) {
        let idx = linear_index(self.dims, i, j, k);
        self.values[idx] = v;
    }
}

/// Pre-threshold segmentation scores.
pub type LogitVolume = Grid<f64>;

/// Binary segmentation; every value is 0 or 1.
pub type MaskVolume = Grid<u8>;

impl MaskVolume {
    pub fn foreground_count(&self) -> usize {
        self.values.iter().filter(|&&v| v != 0).count()
    }
}
