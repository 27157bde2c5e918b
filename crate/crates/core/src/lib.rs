//! Promptable volumetric segmentation engine.
//!
//! A [`session::Session`] holds one volume, the user's include/exclude points
//! and the committed masks. Each prompt change runs the pipeline
//! RAS -> voxel -> crop/pad window -> encode (cached) -> decode -> restore.
//! [`uncertainty::run_ensemble`] re-decodes the cached embedding with
//! pseudo-prompts sampled from the current mask and reports the per-voxel
//! spread of the logits.

pub mod backend;
pub mod bench;
pub mod config;
pub mod geometry;
pub mod nifti;
pub mod session;
pub mod uncertainty;
pub mod volume;

pub use backend::{
    binarize, BackendDescriptor, BackendError, BackendRegistry, Dimensionality, ImageEmbedding, PromptSet,
    SegmentationBackend,
};
pub use config::EngineConfig;
pub use geometry::{Affine, GeometryError, RasPoint, RegionMap, VoxelIndex};
pub use nifti::{peek_header, read_nifti, write_nifti, write_nifti_gz, NiftiError, NiftiHeader};
pub use session::{PromptKind, PromptUpdate, Session, SessionError, SessionSummary};
pub use uncertainty::{
    run_ensemble, sample_prompts, uncertainty_to_heatmap, EnsembleConfig, EnsembleSummary, UncertaintyVolume,
};
pub use volume::{ContentHash, ElementType, Grid, LogitVolume, MaskVolume, Volume, VolumeError, VoxelData};
