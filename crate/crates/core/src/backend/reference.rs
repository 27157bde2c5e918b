//! Closed-form reference backend.
//!
//! Encoder: per-block mean and population standard deviation of intensity
//! (one block per embedding cell), plus an intensity codebook the decoder
//! uses as a lookup table.
//!
//! Decoder, for every voxel `x`:
//!
//! ```text
//! logit(x) = max_{p in include} s(x,p) - max_{q in exclude} s(x,q) + gamma * tanh(prev(x))
//! s(x,p)   = w_d * exp(-|x-p|^2 / (2 sigma_d^2)) + w_i * exp(-(I(x)-I(p))^2 / (2 sigma_i^2))
//! ```
//!
//! An empty exclude set and a missing `prev` each contribute 0.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{
    BackendDescriptor, BackendError, ImageEmbedding, IntensityCodebook, PromptSet, SegmentationBackend,
};
use crate::volume::{LogitVolume, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReferenceParams {
    pub w_d: f64,
    pub w_i: f64,
    /// Spatial bandwidth in voxels.
    pub sigma_d: f64,
    /// Intensity bandwidth as a fraction of the input's intensity range.
    pub sigma_i_fraction: f64,
    /// Absolute intensity bandwidth; overrides the fraction when set.
    pub sigma_i: Option<f64>,
    pub gamma: f64,
    /// Largest number of distinct intensities kept in the codebook.
    pub codebook_limit: usize,
}

impl Default for ReferenceParams {
    fn default() -> Self {
        Self {
            w_d: 4.0,
            w_i: 4.0,
            sigma_d: 12.0,
            sigma_i_fraction: 0.1,
            sigma_i: None,
            gamma: 1.0,
            codebook_limit: 1 << 16,
        }
    }
}

impl ReferenceParams {
    pub fn validate(&self) -> Result<(), BackendError> {
        let finite = [
            self.w_d,
            self.w_i,
            self.sigma_d,
            self.sigma_i_fraction,
            self.gamma,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite || self.sigma_d <= 0.0 || self.sigma_i_fraction < 0.0 {
            return Err(BackendError::InvalidDescriptor(format!(
                "invalid reference parameters {self:?}"
            )));
        }
        if let Some(s) = self.sigma_i {
            if !(s.is_finite() && s >= 0.0) {
                return Err(BackendError::InvalidDescriptor(format!("sigma_i = {s}")));
            }
        }
        Ok(())
    }

    /// Intensity bandwidth for an input with the given (min, max).
    pub fn sigma_i_for(&self, range: (f64, f64)) -> f64 {
        self.sigma_i
            .unwrap_or(self.sigma_i_fraction * (range.1 - range.0))
    }
}

/// Intensity similarity kernel. A zero bandwidth degenerates to equality.
#[inline]
pub(crate) fn intensity_kernel(a: f64, b: f64, sigma: f64) -> f64 {
    if sigma > 0.0 {
        let d = a - b;
        (-(d * d) / (2.0 * sigma * sigma)).exp()
    } else if a == b {
        1.0
    } else {
        0.0
    }
}

/// On-disk description of a reference model (JSON), used by the external
/// runtime protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceArtifact {
    pub descriptor: BackendDescriptor,
    #[serde(default)]
    pub params: ReferenceParams,
}

#[derive(Debug, Clone)]
pub struct ReferenceBackend {
    descriptor: BackendDescriptor,
    params: ReferenceParams,
}

impl ReferenceBackend {
    pub fn new(descriptor: BackendDescriptor, params: ReferenceParams) -> Result<Self, BackendError> {
        descriptor.validate()?;
        params.validate()?;
        Ok(Self { descriptor, params })
    }

    pub fn params(&self) -> &ReferenceParams {
        &self.params
    }

    fn block_statistics(&self, volume: &Volume) -> Vec<f64> {
        let dims = volume.dims();
        let stride = self.descriptor.stride;
        let grid = self.descriptor.embedding_grid();
        let cells: usize = grid.iter().product();
        let mut mean = vec![0.0; cells];
        let mut std = vec![0.0; cells];
        for gz in 0..grid[2] {
            for gy in 0..grid[1] {
                for gx in 0..grid[0] {
                    let cell = gx + grid[0] * (gy + grid[1] * gz);
                    let lo = [gx * stride[0], gy * stride[1], gz * stride[2]];
                    let hi: [usize; 3] = std::array::from_fn(|a| (lo[a] + stride[a]).min(dims[a]));
                    // shift by the block's first voxel so constant blocks are exact
                    let shift = volume.get(lo[0], lo[1], lo[2]);
                    let mut n = 0usize;
                    let mut sum = 0.0;
                    for k in lo[2]..hi[2] {
                        for j in lo[1]..hi[1] {
                            let row = volume.linear_index(0, j, k);
                            for i in lo[0]..hi[0] {
                                sum += volume.get_linear(row + i) - shift;
                                n += 1;
                            }
                        }
                    }
                    let m = shift + sum / n as f64;
                    let mut sq = 0.0;
                    for k in lo[2]..hi[2] {
                        for j in lo[1]..hi[1] {
                            let row = volume.linear_index(0, j, k);
                            for i in lo[0]..hi[0] {
                                let d = volume.get_linear(row + i) - m;
                                sq += d * d;
                            }
                        }
                    }
                    mean[cell] = m;
                    std[cell] = (sq / n as f64).sqrt();
                }
            }
        }
        mean.extend(std);
        mean
    }

    fn codebook(&self, volume: &Volume) -> Option<IntensityCodebook> {
        let values = volume.data().to_f64_vec();
        let mut levels = values.clone();
        levels.sort_unstable_by(f64::total_cmp);
        levels.dedup_by(|a, b| a.to_bits() == b.to_bits());
        if levels.len() > self.params.codebook_limit {
            return None;
        }
        let codes = values
            .iter()
            .map(|v| {
                levels
                    .binary_search_by(|l| l.total_cmp(v))
                    .expect("every value is a level") as u32
            })
            .collect();
        Some(IntensityCodebook { levels, codes })
    }
}

/// Per-prompt precomputation for the decode loop.
struct PreparedPrompt {
    dx2: Vec<u32>,
    dy2: Vec<u32>,
    dz2: Vec<u32>,
    intensity: IntensityTerm,
}

enum IntensityTerm {
    /// `w_i * kernel(level, I(p))` per codebook level.
    Lut(Vec<f64>),
    /// Evaluate the kernel against `I(p)` directly.
    Direct(f64),
}

impl PreparedPrompt {
    fn new(
        p: [usize; 3],
        dims: [usize; 3],
        image: &Volume,
        codebook: Option<&IntensityCodebook>,
        params: &ReferenceParams,
        sigma_i: f64,
    ) -> Self {
        let axis = |a: usize| -> Vec<u32> {
            (0..dims[a])
                .map(|x| {
                    let d = x.abs_diff(p[a]) as u32;
                    d * d
                })
                .collect()
        };
        let ip = image.get(p[0], p[1], p[2]);
        let intensity = match codebook {
            Some(cb) => IntensityTerm::Lut(
                cb.levels
                    .iter()
                    .map(|&l| params.w_i * intensity_kernel(l, ip, sigma_i))
                    .collect(),
            ),
            None => IntensityTerm::Direct(ip),
        };
        Self {
            dx2: axis(0),
            dy2: axis(1),
            dz2: axis(2),
            intensity,
        }
    }
}

/// max_p s(x, p) over one side of the prompt set for a single row of voxels.
#[allow(clippy::too_many_arguments)]
fn row_max(
    prompts: &[PreparedPrompt],
    j: usize,
    k: usize,
    row: usize,
    dlut: &[f64],
    image: &Volume,
    codes: Option<&[u32]>,
    w_i: f64,
    sigma_i: f64,
    out: &mut [f64],
) {
    out.fill(f64::NEG_INFINITY);
    for pp in prompts {
        let base = pp.dz2[k] + pp.dy2[j];
        match (&pp.intensity, codes) {
            (IntensityTerm::Lut(lut), Some(codes)) => {
                let codes = &codes[row..row + out.len()];
                for ((o, &dx), &c) in out.iter_mut().zip(&pp.dx2).zip(codes) {
                    let s = dlut[(base + dx) as usize] + lut[c as usize];
                    *o = o.max(s);
                }
            }
            (IntensityTerm::Direct(ip), _) => {
                for (i, (o, &dx)) in out.iter_mut().zip(&pp.dx2).enumerate() {
                    let s = dlut[(base + dx) as usize]
                        + w_i * intensity_kernel(image.get_linear(row + i), *ip, sigma_i);
                    *o = o.max(s);
                }
            }
            (IntensityTerm::Lut(_), None) => unreachable!("lookup tables imply a codebook"),
        }
    }
}

impl SegmentationBackend for ReferenceBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn encode(&self, volume: &Volume) -> Result<ImageEmbedding, BackendError> {
        if volume.dims() != self.descriptor.input_dims {
            return Err(BackendError::DimMismatch(format!(
                "volume {:?}, backend `{}` expects {:?}",
                volume.dims(),
                self.descriptor.name,
                self.descriptor.input_dims
            )));
        }
        Ok(ImageEmbedding {
            grid: self.descriptor.embedding_grid(),
            channels: 2,
            values: self.block_statistics(volume),
            backend: self.descriptor.name.clone(),
            content_hash: volume.content_hash(),
            codebook: self.codebook(volume).map(Arc::new),
        })
    }

    fn decode(
        &self,
        embedding: &ImageEmbedding,
        prompts: &PromptSet,
        prev: Option<&LogitVolume>,
        image: &Volume,
    ) -> Result<LogitVolume, BackendError> {
        let dims = self.descriptor.input_dims;
        if image.dims() != dims {
            return Err(BackendError::DimMismatch(format!(
                "image {:?} vs model input {dims:?}",
                image.dims()
            )));
        }
        embedding.check(&self.descriptor)?;
        prompts.validate(dims)?;
        if let Some(prev) = prev {
            if prev.dims != dims {
                return Err(BackendError::DimMismatch(format!(
                    "previous logits {:?} vs model input {dims:?}",
                    prev.dims
                )));
            }
        }
        let codebook = embedding
            .codebook
            .as_deref()
            .filter(|cb| cb.codes.len() == image.len());

        let p = &self.params;
        let sigma_i = p.sigma_i_for(image.range());
        let two_sd2 = 2.0 * p.sigma_d * p.sigma_d;
        let max_d2: usize = dims.iter().map(|&d| (d - 1) * (d - 1)).sum();
        let dlut: Vec<f64> = (0..=max_d2)
            .map(|d2| p.w_d * (-(d2 as f64) / two_sd2).exp())
            .collect();

        let prepare = |pts: &[crate::geometry::VoxelIndex]| -> Vec<PreparedPrompt> {
            pts.iter()
                .map(|v| PreparedPrompt::new(v.as_array(), dims, image, codebook, p, sigma_i))
                .collect()
        };
        let include = prepare(&prompts.include);
        let exclude = prepare(&prompts.exclude);
        let codes = codebook.map(|cb| cb.codes.as_slice());

        let mut out = LogitVolume::filled(dims, 0.0);
        let mut inc_row = vec![0.0; dims[0]];
        let mut exc_row = vec![0.0; dims[0]];
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                let row = image.linear_index(0, j, k);
                row_max(
                    &include,
                    j,
                    k,
                    row,
                    &dlut,
                    image,
                    codes,
                    p.w_i,
                    sigma_i,
                    &mut inc_row,
                );
                if exclude.is_empty() {
                    exc_row.fill(0.0);
                } else {
                    row_max(
                        &exclude,
                        j,
                        k,
                        row,
                        &dlut,
                        image,
                        codes,
                        p.w_i,
                        sigma_i,
                        &mut exc_row,
                    );
                }
                let dst = &mut out.values[row..row + dims[0]];
                match prev {
                    Some(prev) => {
                        let prev = &prev.values[row..row + dims[0]];
                        for (((o, a), b), q) in dst.iter_mut().zip(&inc_row).zip(&exc_row).zip(prev) {
                            *o = a - b + p.gamma * q.tanh();
                        }
                    }
                    None => {
                        for ((o, a), b) in dst.iter_mut().zip(&inc_row).zip(&exc_row) {
                            *o = a - b;
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}
