//! Self-ensembling uncertainty.
//!
//! The working logits are thresholded into an initial mask; each of `n`
//! ensemble members decodes the cached embedding with `k` include points
//! drawn from that mask and no previous logits. The members' per-voxel mean
//! is the ensemble logit volume and their population standard deviation is
//! the uncertainty. The encoder is never called.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{binarize, PromptSet};
use crate::geometry::{crop_field, place_into, VoxelIndex};
use crate::session::{Session, SessionError};
use crate::volume::{slice_indices, unravel, Grid, LogitVolume, MaskVolume};

/// Per-voxel ensemble standard deviation.
pub type UncertaintyVolume = Grid<f64>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnsembleConfig {
    /// Ensemble members.
    pub n: usize,
    /// Points per member; defaults to the number of user include prompts.
    pub k: Option<usize>,
    /// Threshold for the initial mask.
    pub tau: f64,
    pub seed: u64,
    /// Decode members on the rayon pool. Output does not depend on this.
    pub parallel: bool,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            n: 5,
            k: None,
            tau: 0.0,
            seed: 0,
            parallel: true,
        }
    }
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<(), SessionError> {
        if self.n < 2 {
            return Err(SessionError::InvalidConfig(format!(
                "n = {} (need at least 2)",
                self.n
            )));
        }
        if self.k == Some(0) {
            return Err(SessionError::InvalidConfig("k = 0".into()));
        }
        if !self.tau.is_finite() {
            return Err(SessionError::InvalidConfig(format!("tau = {}", self.tau)));
        }
        Ok(())
    }
}

/// Ensemble output kept on the session.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleResult {
    pub config: EnsembleConfig,
    pub mean: LogitVolume,
    pub uncertainty: UncertaintyVolume,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSummary {
    pub revision: u64,
    pub runs: usize,
    /// Points sampled per member, one entry per decoded window.
    pub k: Vec<usize>,
    /// Foreground voxels of the initial mask that were eligible for sampling.
    pub foreground: usize,
    pub max_std: f64,
    /// Mean standard deviation over the eligible foreground.
    pub mean_std_foreground: f64,
    pub encode_calls: u64,
}

/// Draw `k` include points uniformly from the mask's foreground.
///
/// Without replacement when the foreground has at least `k` voxels, with
/// replacement otherwise. The stream is fixed by `(seed, run)`.
pub fn sample_prompts(mask: &MaskVolume, k: usize, seed: u64, run: u64) -> Result<PromptSet, SessionError> {
    sample_from(&foreground(mask), mask.dims, k, seed, run)
}

fn foreground(mask: &MaskVolume) -> Vec<usize> {
    mask.values
        .iter()
        .enumerate()
        .filter(|(_, &v)| v != 0)
        .map(|(i, _)| i)
        .collect()
}

fn sample_from(
    fg: &[usize],
    dims: [usize; 3],
    k: usize,
    seed: u64,
    run: u64,
) -> Result<PromptSet, SessionError> {
    if fg.is_empty() {
        return Err(SessionError::EmptyMask);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(run);
    let picks: Vec<usize> = if fg.len() >= k {
        index::sample(&mut rng, fg.len(), k).into_vec()
    } else {
        (0..k).map(|_| rng.random_range(0..fg.len())).collect()
    };
    let include = picks
        .into_iter()
        .map(|p| VoxelIndex::from_array(unravel(dims, fg[p])))
        .collect();
    Ok(PromptSet::includes(include))
}

/// Streaming per-voxel mean and population variance.
#[derive(Debug, Clone)]
pub struct Welford {
    count: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    pub fn new(len: usize) -> Self {
        Self {
            count: 0,
            mean: vec![0.0; len],
            m2: vec![0.0; len],
        }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn push(&mut self, sample: &[f64]) {
        assert_eq!(sample.len(), self.mean.len(), "sample length");
        self.count += 1;
        let n = self.count as f64;
        for ((m, s), &x) in self.mean.iter_mut().zip(&mut self.m2).zip(sample) {
            let delta = x - *m;
            *m += delta / n;
            *s += delta * (x - *m);
        }
    }

    /// `(mean, population std)`; both empty-safe only after at least one push.
    pub fn finish(self) -> (Vec<f64>, Vec<f64>) {
        let n = self.count as f64;
        let std = self.m2.iter().map(|&s| (s / n).max(0.0).sqrt()).collect();
        (self.mean, std)
    }
}

/// Mean and population standard deviation of a stack of logit volumes,
/// reduced in order.
pub fn ensemble_statistics(
    members: &[LogitVolume],
) -> Result<(LogitVolume, UncertaintyVolume), SessionError> {
    let first = members
        .first()
        .ok_or_else(|| SessionError::InvalidConfig("empty ensemble".into()))?;
    let mut acc = Welford::new(first.len());
    for m in members {
        if m.dims != first.dims {
            return Err(SessionError::InvalidConfig(format!(
                "member dims {:?} vs {:?}",
                m.dims, first.dims
            )));
        }
        acc.push(&m.values);
    }
    let (mean, std) = acc.finish();
    Ok((
        Grid {
            dims: first.dims,
            values: mean,
        },
        Grid {
            dims: first.dims,
            values: std,
        },
    ))
}

fn region_seed(seed: u64, region: usize) -> u64 {
    seed ^ (region as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Run the ensemble on a session's cached embedding(s) and store the result.
///
/// Members are decoded independently (in parallel when configured) and
/// reduced in run order, so the output is the same either way.
pub fn run_ensemble(session: &mut Session, config: &EnsembleConfig) -> Result<EnsembleSummary, SessionError> {
    config.validate()?;
    let working = session.working_logits().ok_or(SessionError::NoWorkingMask)?;
    let dims = working.dims;
    let background = session.config().background_logit;
    let backend = session.segmentation_backend().clone();
    let mut mean = LogitVolume::filled(dims, background);
    let mut uncertainty = UncertaintyVolume::filled(dims, 0.0);
    let mut ks = Vec::new();
    let mut foreground = 0;
    let mut fg_std = 0.0;

    for (r, region) in session.regions().iter().enumerate() {
        let entry = session.cached(&region.map).ok_or(SessionError::NoEmbedding)?;
        let m0 = binarize(&crop_field(working, &entry.map, background), config.tau);
        let fg = self::foreground(&m0);
        if fg.is_empty() {
            continue;
        }
        foreground += fg.len();
        let k = config.k.unwrap_or(region.includes).max(1);
        ks.push(k);
        let seed = region_seed(config.seed, r);
        let member = |run: u64| -> Result<LogitVolume, SessionError> {
            let prompts = sample_from(&fg, m0.dims, k, seed, run)?;
            Ok(backend.decode(&entry.embedding, &prompts, None, &entry.image)?)
        };
        let runs = 1..=config.n as u64;
        let members: Vec<Result<LogitVolume, SessionError>> = if config.parallel {
            runs.into_par_iter().map(member).collect()
        } else {
            runs.map(member).collect()
        };
        let mut acc = Welford::new(m0.len());
        for m in members {
            acc.push(&m?.values);
        }
        let (mu, sd) = acc.finish();
        fg_std += fg.iter().map(|&i| sd[i]).sum::<f64>();
        let map = entry.map;
        place_into(
            &mut mean,
            &Grid {
                dims: map.dims,
                values: mu,
            },
            &map,
        );
        place_into(
            &mut uncertainty,
            &Grid {
                dims: map.dims,
                values: sd,
            },
            &map,
        );
    }
    if foreground == 0 {
        return Err(SessionError::EmptyMask);
    }

    let max_std = uncertainty.values.iter().copied().fold(0.0, f64::max);
    session.store_ensemble(EnsembleResult {
        config: config.clone(),
        mean,
        uncertainty,
    });
    Ok(EnsembleSummary {
        revision: session.revision(),
        runs: config.n,
        k: ks,
        foreground,
        max_std,
        mean_std_foreground: fg_std / foreground as f64,
        encode_calls: session.encode_calls(),
    })
}

/// Normalized 2D view of an uncertainty volume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub width: usize,
    pub height: usize,
    /// Row-major, in `[0, 1]`.
    pub values: Vec<f64>,
}

impl Heatmap {
    /// Quantize to bytes (0 = lowest uncertainty).
    pub fn to_u8(&self) -> Vec<u8> {
        self.values.iter().map(|&v| (v * 255.0).round() as u8).collect()
    }
}

/// One slice of `u`, min-max normalized over the whole volume. A constant
/// volume maps to all zeros.
pub fn uncertainty_to_heatmap(
    u: &UncertaintyVolume,
    axis: usize,
    index: usize,
) -> Result<Heatmap, SessionError> {
    let (width, height, idx) =
        slice_indices(u.dims, axis, index).ok_or_else(|| SessionError::IndexOutOfRange {
            index,
            len: if axis < 3 { u.dims[axis] } else { 0 },
        })?;
    let lo = u.values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = u.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let values = idx
        .into_iter()
        .map(|i| {
            if span > 0.0 {
                (u.values[i] - lo) / span
            } else {
                0.0
            }
        })
        .collect();
    Ok(Heatmap {
        width,
        height,
        values,
    })
}
