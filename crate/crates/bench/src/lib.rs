//! Shared fixtures for the engine benchmarks.

use std::sync::Arc;

use voxprompt_core::backend::ReferenceParams;
use voxprompt_core::bench::{phantom, phantom_prompts, Phantom};
use voxprompt_core::geometry::{fit_to_model, map_prompt, voxel_to_ras};
use voxprompt_core::{BackendRegistry, EngineConfig, NiftiHeader, PromptKind, PromptSet, Session, Volume};

pub fn registry() -> Arc<BackendRegistry> {
    Arc::new(BackendRegistry::with_reference(ReferenceParams::default()))
}

/// Model-space image and include prompts for `backend` on a seeded phantom.
pub fn model_inputs(
    registry: &BackendRegistry,
    backend: &str,
    dims: [usize; 3],
    prompts: usize,
) -> (Volume, PromptSet) {
    let b = registry.get(backend).expect("reference backend");
    let ph = phantom(dims, 0);
    let voxels = phantom_prompts(&ph, prompts);
    let (image, map) = fit_to_model(&ph.volume, &voxels, b.descriptor().input_dims).expect("phantom fits");
    let set = PromptSet::includes(voxels.iter().map(|&p| map_prompt(p, &map)).collect());
    (image, set)
}

/// A session on a phantom with `prompts` include points already placed.
pub fn prompted_session(
    registry: Arc<BackendRegistry>,
    backend: &str,
    ph: &Phantom,
    prompts: usize,
) -> Session {
    let header = NiftiHeader::for_volume(&ph.volume);
    let mut s = Session::from_volume(
        ph.volume.clone(),
        header,
        backend,
        registry,
        EngineConfig::default(),
    )
    .expect("backend registered");
    for p in phantom_prompts(ph, prompts) {
        s.add_prompt(voxel_to_ras(p, ph.volume.affine()), PromptKind::Include)
            .expect("phantom prompt fits");
    }
    s
}
