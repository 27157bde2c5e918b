//! Interactive segmentation state: one volume, two markup lists, the working
//! logits and the committed masks.
//!
//! Every prompt change runs RAS -> voxel -> window -> encode (cached) ->
//! decode -> restore. Operations either succeed and bump the revision or
//! fail and leave the session exactly as it was.
//!
//! Slice-wise backends get one window per axial slice holding prompts;
//! slices without include prompts keep the background logit.

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::{
    binarize, BackendDescriptor, BackendError, BackendRegistry, Dimensionality, ImageEmbedding, PromptSet,
    SegmentationBackend,
};
use crate::config::EngineConfig;
use crate::geometry::{
    crop, crop_field, map_prompt, place_into, plan_window, ras_to_voxel, restore_mask, GeometryError,
    RasPoint, RegionMap, VoxelIndex,
};
use crate::nifti::{read_nifti_report, write_nifti, write_nifti_gz, NiftiError, NiftiHeader};
use crate::uncertainty::EnsembleResult;
use crate::volume::VoxelData;
use crate::volume::{ContentHash, LogitVolume, MaskVolume, Volume};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SessionError {
    #[error(transparent)]
    Nifti(#[from] NiftiError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("index {index} out of range (length {len})")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("no working mask")]
    NoWorkingMask,
    #[error("no cached embedding for the current window")]
    NoEmbedding,
    #[error("voxel {0:?} already carries a prompt of the other kind")]
    PromptConflict(VoxelIndex),
    #[error("mask has no foreground voxels")]
    EmptyMask,
    #[error("unknown mask {0}")]
    UnknownMask(u64),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

impl SessionError {
    /// Stable machine-readable name.
    pub fn code(&self) -> &'static str {
        match self {
            Self::Nifti(e) => match e {
                NiftiError::BadMagic(_) => "BadMagic",
                NiftiError::UnsupportedDatatype(_) => "UnsupportedDatatype",
                NiftiError::UnsupportedLayout(_) => "UnsupportedLayout",
                NiftiError::TruncatedData { .. } => "TruncatedData",
                NiftiError::DimMismatch(_) => "DimMismatch",
                NiftiError::Gzip(_) => "Gzip",
                NiftiError::Volume(_) => "InvalidVolume",
            },
            Self::Geometry(e) => match e {
                GeometryError::SingularAffine => "SingularAffine",
                GeometryError::OutOfBounds { .. } => "OutOfBounds",
                GeometryError::NonFinite(_) => "NonFinite",
                GeometryError::PromptsUnfittable { .. } => "PromptsUnfittable",
                GeometryError::NoPrompts => "NoPrompts",
                GeometryError::DimMismatch(_) => "DimMismatch",
            },
            Self::Backend(e) => match e {
                BackendError::DimMismatch(_) => "DimMismatch",
                BackendError::EmptyIncludeSet => "EmptyIncludeSet",
                BackendError::InvalidPrompts(_) => "InvalidPrompts",
                BackendError::UnknownBackend(_) => "UnknownBackend",
                BackendError::ArtifactNotFound(_) => "ArtifactNotFound",
                BackendError::RuntimeUnavailable(_) => "RuntimeUnavailable",
                BackendError::ShapeMismatch(_) => "ShapeMismatch",
                BackendError::Protocol(_) => "RuntimeProtocol",
                BackendError::InvalidDescriptor(_) => "InvalidDescriptor",
            },
            Self::IndexOutOfRange { .. } => "IndexOutOfRange",
            Self::NoWorkingMask => "NoWorkingMask",
            Self::NoEmbedding => "NoEmbedding",
            Self::PromptConflict(_) => "PromptConflict",
            Self::EmptyMask => "EmptyMask",
            Self::UnknownMask(_) => "UnknownMask",
            Self::InvalidConfig(_) => "InvalidConfig",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptKind {
    Include,
    Exclude,
}

impl std::str::FromStr for PromptKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "include" => Ok(Self::Include),
            "exclude" => Ok(Self::Exclude),
            other => Err(format!("unknown prompt kind `{other}`")),
        }
    }
}

/// A markup point and the voxel it resolved to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub ras: RasPoint,
    pub voxel: VoxelIndex,
}

/// Inclusive voxel bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub min: [usize; 3],
    pub max: [usize; 3],
}

/// Result of a prompt mutation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptUpdate {
    pub revision: u64,
    /// Foreground voxels of the working mask at the session threshold.
    pub foreground: usize,
    /// Voxels whose mask value changed, if any did.
    pub changed: Option<BoundingBox>,
    /// Voxel of the added prompt.
    pub voxel: Option<VoxelIndex>,
    pub encode_calls: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CommittedMask {
    pub id: u64,
    pub label: String,
    pub tau: f64,
    pub mask: Arc<MaskVolume>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskInfo {
    pub id: u64,
    pub label: String,
    pub tau: f64,
    pub foreground: usize,
}

/// Serializable overview of a session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub id: String,
    pub dims: [usize; 3],
    pub affine: crate::geometry::Affine,
    pub intensity_range: (f64, f64),
    pub backend: BackendDescriptor,
    pub include: Vec<Prompt>,
    pub exclude: Vec<Prompt>,
    pub revision: u64,
    pub has_working_mask: bool,
    pub has_uncertainty: bool,
    pub masks: Vec<MaskInfo>,
    pub encode_calls: u64,
    pub volume_hash: String,
}

/// A decoded model window and how many user include prompts drove it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Region {
    pub map: RegionMap,
    pub includes: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct CacheEntry {
    pub map: RegionMap,
    pub image: Arc<Volume>,
    pub embedding: Arc<ImageEmbedding>,
}

/// Most-recently-used-last list of encoded windows for one backend.
#[derive(Debug, Default)]
struct EmbeddingCache {
    entries: Vec<CacheEntry>,
    capacity: usize,
}

impl EmbeddingCache {
    fn find(&self, map: &RegionMap) -> Option<&CacheEntry> {
        self.entries.iter().find(|e| e.map.key() == map.key())
    }

    fn touch(&mut self, map: &RegionMap, fresh: &[CacheEntry]) {
        if let Some(pos) = self.entries.iter().position(|e| e.map.key() == map.key()) {
            let e = self.entries.remove(pos);
            self.entries.push(e);
        } else if let Some(e) = fresh.iter().find(|e| e.map.key() == map.key()) {
            self.entries.push(e.clone());
        }
        while self.entries.len() > self.capacity.max(1) {
            self.entries.remove(0);
        }
    }
}

/// Staged result of a recompute, applied only on success.
struct Outcome {
    working: Option<LogitVolume>,
    regions: Vec<Region>,
    fresh: Vec<CacheEntry>,
}

#[derive(Debug)]
pub struct Session {
    id: String,
    volume: Arc<Volume>,
    header: NiftiHeader,
    nonfinite_replaced: usize,
    registry: Arc<BackendRegistry>,
    backend: Arc<dyn SegmentationBackend>,
    config: EngineConfig,
    include: Vec<Prompt>,
    exclude: Vec<Prompt>,
    working: Option<LogitVolume>,
    regions: Vec<Region>,
    masks: Vec<CommittedMask>,
    next_mask_id: u64,
    cache: EmbeddingCache,
    encode_calls: AtomicU64,
    ensemble: Option<EnsembleResult>,
    revision: u64,
}

impl Session {
    /// Load a NIfTI byte stream (optionally gzip-compressed) into a new session.
    pub fn create(
        bytes: &[u8],
        backend: &str,
        registry: Arc<BackendRegistry>,
        config: EngineConfig,
    ) -> Result<Self, SessionError> {
        let backend = registry.get(backend)?;
        let loaded = read_nifti_report(bytes)?;
        let mut s = Self::with_backend(loaded.volume, loaded.header, backend, registry, config);
        s.nonfinite_replaced = loaded.nonfinite_replaced;
        Ok(s)
    }

    pub fn from_volume(
        volume: Volume,
        header: NiftiHeader,
        backend: &str,
        registry: Arc<BackendRegistry>,
        config: EngineConfig,
    ) -> Result<Self, SessionError> {
        let backend = registry.get(backend)?;
        Ok(Self::with_backend(volume, header, backend, registry, config))
    }

    fn with_backend(
        volume: Volume,
        header: NiftiHeader,
        backend: Arc<dyn SegmentationBackend>,
        registry: Arc<BackendRegistry>,
        config: EngineConfig,
    ) -> Self {
        let cache = EmbeddingCache {
            entries: Vec::new(),
            capacity: cache_capacity(&config, backend.descriptor(), volume.dims()),
        };
        Self {
            id: uuid::Uuid::new_v4().to_string(),
            volume: Arc::new(volume),
            header,
            nonfinite_replaced: 0,
            registry,
            backend,
            config,
            include: Vec::new(),
            exclude: Vec::new(),
            working: None,
            regions: Vec::new(),
            masks: Vec::new(),
            next_mask_id: 1,
            cache,
            encode_calls: AtomicU64::new(0),
            ensemble: None,
            revision: 0,
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn volume(&self) -> &Volume {
        &self.volume
    }

    pub fn header(&self) -> &NiftiHeader {
        &self.header
    }

    /// Non-finite voxels replaced at load time.
    pub fn nonfinite_replaced(&self) -> usize {
        self.nonfinite_replaced
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn backend(&self) -> &BackendDescriptor {
        self.backend.descriptor()
    }

    pub fn prompts(&self, kind: PromptKind) -> &[Prompt] {
        match kind {
            PromptKind::Include => &self.include,
            PromptKind::Exclude => &self.exclude,
        }
    }

    pub fn working_logits(&self) -> Option<&LogitVolume> {
        self.working.as_ref()
    }

    pub fn working_mask(&self, tau: f64) -> Option<MaskVolume> {
        self.working.as_ref().map(|l| binarize(l, tau))
    }

    pub fn masks(&self) -> &[CommittedMask] {
        &self.masks
    }

    pub fn mask(&self, id: u64) -> Result<&CommittedMask, SessionError> {
        self.masks
            .iter()
            .find(|m| m.id == id)
            .ok_or(SessionError::UnknownMask(id))
    }

    pub fn ensemble(&self) -> Option<&EnsembleResult> {
        self.ensemble.as_ref()
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    /// Encoder invocations since the session was created.
    pub fn encode_calls(&self) -> u64 {
        self.encode_calls.load(Ordering::Relaxed)
    }

    pub fn summary(&self) -> SessionSummary {
        SessionSummary {
            id: self.id.clone(),
            dims: self.volume.dims(),
            affine: *self.volume.affine(),
            intensity_range: self.volume.range(),
            backend: self.backend().clone(),
            include: self.include.clone(),
            exclude: self.exclude.clone(),
            revision: self.revision,
            has_working_mask: self.working.is_some(),
            has_uncertainty: self.ensemble.is_some(),
            masks: self
                .masks
                .iter()
                .map(|m| MaskInfo {
                    id: m.id,
                    label: m.label.clone(),
                    tau: m.tau,
                    foreground: m.mask.foreground_count(),
                })
                .collect(),
            encode_calls: self.encode_calls(),
            volume_hash: self.volume.content_hash().to_string(),
        }
    }

    /// Digest of everything a replay must reproduce: revision, backend,
    /// markups, working logits, committed masks and the ensemble output.
    pub fn state_digest(&self) -> ContentHash {
        let mut h = Sha256::new();
        h.update(self.revision.to_le_bytes());
        h.update(self.backend().name.as_bytes());
        h.update(self.volume.content_hash().0);
        for (tag, list) in [(b'i', &self.include), (b'e', &self.exclude)] {
            h.update([tag]);
            h.update((list.len() as u64).to_le_bytes());
            for p in list {
                for c in p.ras.as_array() {
                    h.update(c.to_bits().to_le_bytes());
                }
                for c in p.voxel.as_array() {
                    h.update((c as u64).to_le_bytes());
                }
            }
        }
        hash_field(&mut h, self.working.as_ref());
        h.update((self.masks.len() as u64).to_le_bytes());
        for m in &self.masks {
            h.update(m.id.to_le_bytes());
            h.update((m.label.len() as u64).to_le_bytes());
            h.update(m.label.as_bytes());
            h.update(m.tau.to_bits().to_le_bytes());
            h.update(&m.mask.values);
        }
        match &self.ensemble {
            Some(e) => {
                h.update([1]);
                hash_field(&mut h, Some(&e.mean));
                hash_field(&mut h, Some(&e.uncertainty));
            }
            None => h.update([0]),
        }
        ContentHash(h.finalize().into())
    }

    /// Append a markup point and rerun the pipeline.
    pub fn add_prompt(&mut self, point: RasPoint, kind: PromptKind) -> Result<PromptUpdate, SessionError> {
        let voxel = ras_to_voxel(point, self.volume.affine(), self.volume.dims())?;
        let other = match kind {
            PromptKind::Include => &self.exclude,
            PromptKind::Exclude => &self.include,
        };
        if other.iter().any(|p| p.voxel == voxel) {
            return Err(SessionError::PromptConflict(voxel));
        }
        let mut include = self.include.clone();
        let mut exclude = self.exclude.clone();
        let prompt = Prompt { ras: point, voxel };
        match kind {
            PromptKind::Include => include.push(prompt),
            PromptKind::Exclude => exclude.push(prompt),
        }
        let outcome = match self.mode() {
            Dimensionality::Volumetric => self.recompute_volume(&include, &exclude, true)?,
            Dimensionality::SliceWise => self.recompute_slice(&include, &exclude, voxel.k)?,
        };
        self.include = include;
        self.exclude = exclude;
        Ok(self.apply(outcome, Some(voxel)))
    }

    /// Drop a markup point and recompute from the remaining ones with no
    /// previous logits.
    pub fn remove_prompt(&mut self, kind: PromptKind, index: usize) -> Result<PromptUpdate, SessionError> {
        let list = self.prompts(kind);
        if index >= list.len() {
            return Err(SessionError::IndexOutOfRange {
                index,
                len: list.len(),
            });
        }
        let mut include = self.include.clone();
        let mut exclude = self.exclude.clone();
        match kind {
            PromptKind::Include => include.remove(index),
            PromptKind::Exclude => exclude.remove(index),
        };
        let outcome = match self.mode() {
            Dimensionality::Volumetric => self.recompute_volume(&include, &exclude, false)?,
            Dimensionality::SliceWise => self.recompute_all_slices(&include, &exclude)?,
        };
        self.include = include;
        self.exclude = exclude;
        Ok(self.apply(outcome, None))
    }

    /// Threshold the working logits into a new committed mask and start a
    /// fresh object.
    pub fn commit_mask(&mut self, label: &str, tau: f64) -> Result<u64, SessionError> {
        if !tau.is_finite() {
            return Err(SessionError::InvalidConfig(format!("tau = {tau}")));
        }
        let working = self.working.as_ref().ok_or(SessionError::NoWorkingMask)?;
        let id = self.next_mask_id;
        self.masks.push(CommittedMask {
            id,
            label: label.to_string(),
            tau,
            mask: Arc::new(binarize(working, tau)),
        });
        self.next_mask_id += 1;
        self.include.clear();
        self.exclude.clear();
        self.working = None;
        self.regions.clear();
        self.ensemble = None;
        self.revision += 1;
        Ok(id)
    }

    /// Committed mask as an int16 NIfTI stream on the volume's grid. The
    /// label goes into the description field.
    pub fn export_mask(&self, id: u64, gzip: bool) -> Result<Vec<u8>, SessionError> {
        let m = self.mask(id)?;
        let data = VoxelData::I16(m.mask.values.iter().map(|&v| i16::from(v)).collect());
        let volume = Volume::new(m.mask.dims, data, *self.volume.affine()).map_err(NiftiError::from)?;
        let header = NiftiHeader {
            endianness: self.header.endianness,
            descrip: m.label.clone(),
            ..NiftiHeader::for_volume(&volume)
        };
        let bytes = if gzip {
            write_nifti_gz(&volume, &header)
        } else {
            write_nifti(&volume, &header)
        }?;
        Ok(bytes)
    }

    /// Select another backend. Markups, working logits and cached embeddings
    /// are dropped; committed masks stay. Returns false when `name` is
    /// already active (nothing changes).
    pub fn switch_backend(&mut self, name: &str) -> Result<bool, SessionError> {
        let backend = self.registry.get(name)?;
        if backend.descriptor().name == self.backend().name {
            return Ok(false);
        }
        self.cache = EmbeddingCache {
            entries: Vec::new(),
            capacity: cache_capacity(&self.config, backend.descriptor(), self.volume.dims()),
        };
        self.backend = backend;
        self.include.clear();
        self.exclude.clear();
        self.working = None;
        self.regions.clear();
        self.ensemble = None;
        self.revision += 1;
        Ok(true)
    }

    fn mode(&self) -> Dimensionality {
        self.backend.descriptor().dimensionality
    }

    fn apply(&mut self, outcome: Outcome, voxel: Option<VoxelIndex>) -> PromptUpdate {
        let tau = self.config.tau;
        let changed = changed_box(self.working.as_ref(), outcome.working.as_ref(), tau);
        for r in &outcome.regions {
            self.cache.touch(&r.map, &outcome.fresh);
        }
        self.working = outcome.working;
        self.regions = outcome.regions;
        self.ensemble = None;
        self.revision += 1;
        PromptUpdate {
            revision: self.revision,
            foreground: self
                .working
                .as_ref()
                .map_or(0, |l| l.values.iter().filter(|&&v| v > tau).count()),
            changed,
            voxel,
            encode_calls: self.encode_calls(),
        }
    }

    fn recompute_volume(
        &self,
        include: &[Prompt],
        exclude: &[Prompt],
        chain_prev: bool,
    ) -> Result<Outcome, SessionError> {
        let inc: Vec<VoxelIndex> = include.iter().map(|p| p.voxel).collect();
        let exc: Vec<VoxelIndex> = exclude.iter().map(|p| p.voxel).collect();
        let all: Vec<VoxelIndex> = inc.iter().chain(&exc).copied().collect();
        let mut fresh = Vec::new();
        if all.is_empty() {
            return Ok(Outcome {
                working: None,
                regions: Vec::new(),
                fresh,
            });
        }
        let target = self.backend.descriptor().input_dims;
        let map = plan_window(self.volume.dims(), &all, target)?;
        if inc.is_empty() {
            return Ok(Outcome {
                working: None,
                regions: Vec::new(),
                fresh,
            });
        }
        let prev = if chain_prev { self.working.as_ref() } else { None };
        let (map, logits) = self.infer(map, &inc, &exc, prev, &mut fresh)?;
        let restored = restore_mask(&logits, &map, self.volume.dims(), self.config.background_logit)?;
        Ok(Outcome {
            working: Some(restored),
            regions: vec![Region {
                map,
                includes: inc.len(),
            }],
            fresh,
        })
    }

    /// Recompute one axial slice, keeping every other slice as it is.
    fn recompute_slice(
        &self,
        include: &[Prompt],
        exclude: &[Prompt],
        slice: usize,
    ) -> Result<Outcome, SessionError> {
        let background = self.config.background_logit;
        let dims = self.volume.dims();
        let mut fresh = Vec::new();
        let mut regions: Vec<Region> = self
            .regions
            .iter()
            .filter(|r| r.map.offset[2] != slice as i64)
            .copied()
            .collect();
        let mut working = self
            .working
            .clone()
            .unwrap_or_else(|| LogitVolume::filled(dims, background));
        let previously_decoded = self.regions.iter().any(|r| r.map.offset[2] == slice as i64);
        let prev = if previously_decoded {
            self.working.as_ref()
        } else {
            None
        };
        fill_slice(&mut working, slice, background);
        if let Some((region, logits)) = self.infer_slice(include, exclude, slice, prev, &mut fresh)? {
            place_into(&mut working, &logits, &region.map);
            regions.push(region);
        }
        regions.sort_by_key(|r| r.map.offset[2]);
        Ok(Outcome {
            working: (!regions.is_empty()).then_some(working),
            regions,
            fresh,
        })
    }

    fn recompute_all_slices(&self, include: &[Prompt], exclude: &[Prompt]) -> Result<Outcome, SessionError> {
        let dims = self.volume.dims();
        let mut working = LogitVolume::filled(dims, self.config.background_logit);
        let mut regions = Vec::new();
        let mut fresh = Vec::new();
        let slices: BTreeSet<usize> = include.iter().chain(exclude).map(|p| p.voxel.k).collect();
        for slice in slices {
            if let Some((region, logits)) = self.infer_slice(include, exclude, slice, None, &mut fresh)? {
                place_into(&mut working, &logits, &region.map);
                regions.push(region);
            }
        }
        Ok(Outcome {
            working: (!regions.is_empty()).then_some(working),
            regions,
            fresh,
        })
    }

    fn infer_slice(
        &self,
        include: &[Prompt],
        exclude: &[Prompt],
        slice: usize,
        prev: Option<&LogitVolume>,
        fresh: &mut Vec<CacheEntry>,
    ) -> Result<Option<(Region, LogitVolume)>, SessionError> {
        let on_slice = |list: &[Prompt]| -> Vec<VoxelIndex> {
            list.iter().map(|p| p.voxel).filter(|v| v.k == slice).collect()
        };
        let inc = on_slice(include);
        let exc = on_slice(exclude);
        let all: Vec<VoxelIndex> = inc.iter().chain(&exc).copied().collect();
        if all.is_empty() {
            return Ok(None);
        }
        let map = plan_window(self.volume.dims(), &all, self.backend.descriptor().input_dims)?;
        if inc.is_empty() {
            return Ok(None);
        }
        let (map, logits) = self.infer(map, &inc, &exc, prev, fresh)?;
        Ok(Some((
            Region {
                map,
                includes: inc.len(),
            },
            logits,
        )))
    }

    /// Decode source-space prompts inside `map`. Returns the window with its
    /// pad value filled in and the model-space logits.
    fn infer(
        &self,
        map: RegionMap,
        include: &[VoxelIndex],
        exclude: &[VoxelIndex],
        prev: Option<&LogitVolume>,
        fresh: &mut Vec<CacheEntry>,
    ) -> Result<(RegionMap, LogitVolume), SessionError> {
        let entry = self.embedding_for(map, fresh)?;
        let prompts = PromptSet::new(
            include.iter().map(|&v| map_prompt(v, &entry.map)).collect(),
            exclude.iter().map(|&v| map_prompt(v, &entry.map)).collect(),
        );
        let prev = prev.map(|p| crop_field(p, &entry.map, self.config.background_logit));
        let logits = self
            .backend
            .decode(&entry.embedding, &prompts, prev.as_ref(), &entry.image)?;
        Ok((entry.map, logits))
    }

    fn embedding_for(&self, map: RegionMap, fresh: &mut Vec<CacheEntry>) -> Result<CacheEntry, SessionError> {
        if let Some(e) = self.cache.find(&map) {
            return Ok(e.clone());
        }
        if let Some(e) = fresh.iter().find(|e| e.map.key() == map.key()) {
            return Ok(e.clone());
        }
        let map = RegionMap {
            pad_value: self.volume.range().0,
            ..map
        };
        let image = crop(&self.volume, &map);
        self.encode_calls.fetch_add(1, Ordering::Relaxed);
        let embedding = self.backend.encode(&image)?;
        let entry = CacheEntry {
            map,
            image: Arc::new(image),
            embedding: Arc::new(embedding),
        };
        fresh.push(entry.clone());
        Ok(entry)
    }

    pub(crate) fn regions(&self) -> &[Region] {
        &self.regions
    }

    pub(crate) fn cached(&self, map: &RegionMap) -> Option<&CacheEntry> {
        self.cache.find(map)
    }

    pub(crate) fn segmentation_backend(&self) -> &Arc<dyn SegmentationBackend> {
        &self.backend
    }

    pub(crate) fn store_ensemble(&mut self, result: EnsembleResult) {
        self.ensemble = Some(result);
        self.revision += 1;
    }
}

fn cache_capacity(config: &EngineConfig, d: &BackendDescriptor, dims: [usize; 3]) -> usize {
    match d.dimensionality {
        Dimensionality::Volumetric => config.cache_entries.max(1),
        Dimensionality::SliceWise => config.cache_entries.max(dims[2]),
    }
}

fn fill_slice(field: &mut LogitVolume, slice: usize, value: f64) {
    let plane = field.dims[0] * field.dims[1];
    field.values[slice * plane..(slice + 1) * plane].fill(value);
}

fn hash_field(h: &mut Sha256, field: Option<&LogitVolume>) {
    match field {
        Some(f) => {
            h.update([1]);
            for d in f.dims {
                h.update((d as u64).to_le_bytes());
            }
            let mut buf = Vec::with_capacity(8 * 4096);
            for chunk in f.values.chunks(4096) {
                buf.clear();
                buf.extend(chunk.iter().flat_map(|v| v.to_bits().to_le_bytes()));
                h.update(&buf);
            }
        }
        None => h.update([0]),
    }
}

fn changed_box(before: Option<&LogitVolume>, after: Option<&LogitVolume>, tau: f64) -> Option<BoundingBox> {
    let dims = before.or(after)?.dims;
    let fg = |l: Option<&LogitVolume>, i: usize| l.is_some_and(|l| l.values[i] > tau);
    let mut bb: Option<BoundingBox> = None;
    for idx in 0..dims.iter().product() {
        if fg(before, idx) == fg(after, idx) {
            continue;
        }
        let c = crate::volume::unravel(dims, idx);
        bb = Some(match bb {
            None => BoundingBox { min: c, max: c },
            Some(b) => BoundingBox {
                min: std::array::from_fn(|a| b.min[a].min(c[a])),
                max: std::array::from_fn(|a| b.max[a].max(c[a])),
            },
        });
    }
    bb
}
