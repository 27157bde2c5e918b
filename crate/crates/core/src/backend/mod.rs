//! Promptable segmentation backends: encode once, decode per prompt set.

mod external;
mod reference;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::geometry::VoxelIndex;
use crate::volume::{ContentHash, LogitVolume, MaskVolume, Volume};

pub use external::{
    serve_runtime_request, ExternalBackend, RuntimeCommand, RuntimeDescription, RuntimeRequest,
    RuntimeResponse, WireEmbedding, WireGrid, WireVolume,
};
pub use reference::{ReferenceArtifact, ReferenceBackend, ReferenceParams};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BackendError {
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("decode needs at least one include prompt")]
    EmptyIncludeSet,
    #[error("invalid prompt set: {0}")]
    InvalidPrompts(String),
    #[error("unknown backend `{0}`")]
    UnknownBackend(String),
    #[error("model artifact not found: {0}")]
    ArtifactNotFound(String),
    #[error("inference runtime unavailable: {0}")]
    RuntimeUnavailable(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("runtime protocol error: {0}")]
    Protocol(String),
    #[error("invalid descriptor: {0}")]
    InvalidDescriptor(String),
}

/// Whether a backend sees whole volumes or one axial slice at a time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dimensionality {
    Volumetric,
    SliceWise,
}

impl fmt::Display for Dimensionality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Volumetric => "3d",
            Self::SliceWise => "2d",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub name: String,
    /// Model-space input size. Slice-wise backends use a depth of 1.
    pub input_dims: [usize; 3],
    /// Embedding stride per axis.
    pub stride: [usize; 3],
    pub dimensionality: Dimensionality,
}

impl BackendDescriptor {
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.input_dims.contains(&0) || self.stride.contains(&0) {
            return Err(BackendError::InvalidDescriptor(format!(
                "{}: zero input dims or stride",
                self.name
            )));
        }
        if self.input_dims.iter().zip(self.stride).any(|(d, s)| d % s != 0) {
            return Err(BackendError::InvalidDescriptor(format!(
                "{}: input dims {:?} not divisible by stride {:?}",
                self.name, self.input_dims, self.stride
            )));
        }
        if self.dimensionality == Dimensionality::SliceWise && self.input_dims[2] != 1 {
            return Err(BackendError::InvalidDescriptor(format!(
                "{}: slice-wise backends need depth 1",
                self.name
            )));
        }
        Ok(())
    }

    /// Embedding grid for this descriptor's input size.
    pub fn embedding_grid(&self) -> [usize; 3] {
        std::array::from_fn(|a| self.input_dims[a].div_ceil(self.stride[a]))
    }
}

/// Sorted distinct intensities of an encoded volume plus a per-voxel index
/// into them. Lets the decoder evaluate intensity similarity once per level
/// instead of once per voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityCodebook {
    pub levels: Vec<f64>,
    pub codes: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageEmbedding {
    pub grid: [usize; 3],
    pub channels: usize,
    /// Channel-major: `values[c * cells + cell]`.
    pub values: Vec<f64>,
    pub backend: String,
    pub content_hash: ContentHash,
    pub codebook: Option<Arc<IntensityCodebook>>,
}

impl ImageEmbedding {
    pub fn cells(&self) -> usize {
        self.grid.iter().product()
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.cells();
        &self.values[c * n..(c + 1) * n]
    }

    pub fn check(&self, descriptor: &BackendDescriptor) -> Result<(), BackendError> {
        let grid = descriptor.embedding_grid();
        if self.grid != grid {
            return Err(BackendError::ShapeMismatch(format!(
                "embedding grid {:?}, descriptor implies {grid:?}",
                self.grid
            )));
        }
        if self.values.len() != self.channels * self.cells() {
            return Err(BackendError::ShapeMismatch(format!(
                "{} values for {} channels x {} cells",
                self.values.len(),
                self.channels,
                self.cells()
            )));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(BackendError::ShapeMismatch("non-finite embedding value".into()));
        }
        Ok(())
    }
}

/// Model-space point prompts.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSet {
    pub include: Vec<VoxelIndex>,
    pub exclude: Vec<VoxelIndex>,
}

impl PromptSet {
    pub fn new(include: Vec<VoxelIndex>, exclude: Vec<VoxelIndex>) -> Self {
        Self { include, exclude }
    }

    pub fn includes(include: Vec<VoxelIndex>) -> Self {
        Self {
            include,
            exclude: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.include.len() + self.exclude.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Check the decode preconditions against a model-space grid.
    pub fn validate(&self, dims: [usize; 3]) -> Result<(), BackendError> {
        if self.include.is_empty() {
            return Err(BackendError::EmptyIncludeSet);
        }
        if let Some(p) = self
            .include
            .iter()
            .chain(&self.exclude)
            .find(|p| !p.in_bounds(dims))
        {
            return Err(BackendError::InvalidPrompts(format!(
                "{p:?} outside model input {dims:?}"
            )));
        }
        Ok(())
    }

    /// True when no voxel is both an include and an exclude point.
    ///
    /// Sessions keep their markups disjoint; the decoder itself accepts
    /// overlapping points (their similarities cancel).
    pub fn is_disjoint(&self) -> bool {
        !self.include.iter().any(|p| self.exclude.contains(p))
    }
}

/// Strict threshold: 1 where `logit > tau`.
pub fn binarize(logits: &LogitVolume, tau: f64) -> MaskVolume {
    MaskVolume {
        dims: logits.dims,
        values: logits.values.iter().map(|&v| u8::from(v > tau)).collect(),
    }
}

/// Encoder / prompt encoder / mask decoder contract.
///
/// Implementations are immutable after construction and may be called from
/// several threads at once.
pub trait SegmentationBackend: Send + Sync + fmt::Debug {
    fn descriptor(&self) -> &BackendDescriptor;

    /// Embed a model-space volume. Must be deterministic.
    fn encode(&self, volume: &Volume) -> Result<ImageEmbedding, BackendError>;

    /// Produce model-space logits from an embedding and prompts.
    ///
    /// `image` is the model-space volume that produced `embedding`;
    /// `prev` are the previous model-space logits, if any.
    fn decode(
        &self,
        embedding: &ImageEmbedding,
        prompts: &PromptSet,
        prev: Option<&LogitVolume>,
        image: &Volume,
    ) -> Result<LogitVolume, BackendError>;
}

/// Named set of available backends.
#[derive(Debug, Clone, Default)]
pub struct BackendRegistry {
    backends: BTreeMap<String, Arc<dyn SegmentationBackend>>,
}

impl BackendRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// The built-in reference backends:
    /// `reference-3d` (128^3), `reference-3d-lite` (64^3) and
    /// `reference-2d` (256x256 axial slices), all with stride 4.
    pub fn with_reference(params: ReferenceParams) -> Self {
        let mut r = Self::new();
        for d in default_descriptors() {
            r.insert(Arc::new(
                ReferenceBackend::new(d, params.clone()).expect("built-in descriptors are valid"),
            ));
        }
        r
    }

    pub fn insert(&mut self, backend: Arc<dyn SegmentationBackend>) {
        self.backends.insert(backend.descriptor().name.clone(), backend);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn SegmentationBackend>, BackendError> {
        self.backends
            .get(name)
            .cloned()
            .ok_or_else(|| BackendError::UnknownBackend(name.to_string()))
    }

    pub fn descriptors(&self) -> Vec<BackendDescriptor> {
        self.backends.values().map(|b| b.descriptor().clone()).collect()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.backends.keys().map(String::as_str)
    }
}

pub fn default_descriptors() -> Vec<BackendDescriptor> {
    vec![
        BackendDescriptor {
            name: "reference-3d".into(),
            input_dims: [128, 128, 128],
            stride: [4, 4, 4],
            dimensionality: Dimensionality::Volumetric,
        },
        BackendDescriptor {
            name: "reference-3d-lite".into(),
            input_dims: [64, 64, 64],
            stride: [4, 4, 4],
            dimensionality: Dimensionality::Volumetric,
        },
        BackendDescriptor {
            name: "reference-2d".into(),
            input_dims: [256, 256, 1],
            stride: [4, 4, 1],
            dimensionality: Dimensionality::SliceWise,
        },
    ]
}
