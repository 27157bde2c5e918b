//! Wall-clock latency harness: encode, decode, a cold interaction and the
//! ensemble, measured on a seeded phantom.
//!
//! Slice-wise backends are timed per slice; their reports carry the slice
//! count so a per-volume figure can be derived.

use std::fmt::Write as _;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{BackendError, BackendRegistry, Dimensionality, PromptSet};
use crate::config::EngineConfig;
use crate::geometry::{fit_to_model, map_prompt, voxel_to_ras, Affine, VoxelIndex};
use crate::nifti::NiftiHeader;
use crate::session::{PromptKind, Session, SessionError};
use crate::uncertainty::{run_ensemble, EnsembleConfig};
use crate::volume::{Volume, VoxelData};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BenchError {
    #[error("need at least 3 repetitions and 1 warmup iteration (got {reps} and {warmup})")]
    Repetitions { reps: usize, warmup: usize },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error("no prompt voxels to time")]
    NoPrompts,
    #[error("bad record: {0}")]
    Record(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Encode,
    Decode,
    FullInteraction,
    Ensemble,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Encode => "encode",
            Self::Decode => "decode",
            Self::FullInteraction => "full-interaction",
            Self::Ensemble => "ensemble",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    VolumeLevel,
    SliceLevel,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::VolumeLevel => "volume-level",
            Self::SliceLevel => "slice-level",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub backend: String,
    pub phase: Phase,
    pub mode: Mode,
    pub dims: [usize; 3],
    /// Slices per volume for slice-level reports.
    pub slices: Option<usize>,
    pub repetitions: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl TimingReport {
    fn from_samples(
        backend: &str,
        phase: Phase,
        mode: Mode,
        dims: [usize; 3],
        slices: Option<usize>,
        s: &[f64],
    ) -> Self {
        let n = s.len() as f64;
        let min = s.iter().copied().fold(f64::INFINITY, f64::min);
        let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = (s.iter().sum::<f64>() / n).clamp(min, max);
        let var = s.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let report = Self {
            backend: backend.to_string(),
            phase,
            mode,
            dims,
            slices,
            repetitions: s.len(),
            mean,
            std: var.sqrt(),
            min,
            max,
        };
        if report.is_noisy() {
            tracing::warn!(
                backend,
                phase = phase.as_str(),
                cv = report.std / report.mean,
                "timing variance is high"
            );
        }
        report
    }

    /// Coefficient of variation above 0.5.
    pub fn is_noisy(&self) -> bool {
        self.mean > 0.0 && self.std / self.mean > 0.5
    }

    /// Mean seconds per whole volume (slice-level reports scale by slice count).
    pub fn per_volume(&self) -> f64 {
        self.mean * self.slices.unwrap_or(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub prompts: usize,
    pub repetitions: usize,
    pub warmup: usize,
    pub seed: u64,
    pub ensemble: EnsembleConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            prompts: 1,
            repetitions: 10,
            warmup: 1,
            seed: 0,
            ensemble: EnsembleConfig {
                parallel: false,
                ..EnsembleConfig::default()
            },
        }
    }
}

/// Seeded phantom: bright spheres on a noisy background, stored as int16.
#[derive(Debug, Clone)]
pub struct Phantom {
    pub volume: Volume,
    /// Sphere centres; the first is the largest.
    pub centres: Vec<[usize; 3]>,
}

pub fn phantom(dims: [usize; 3], seed: u64) -> Phantom {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let min_dim = *dims.iter().min().unwrap() as f64;
    let mut spheres = Vec::new();
    for s in 0..3 {
        let r = min_dim * if s == 0 { 0.2 } else { 0.1 };
        let c: [usize; 3] = if s == 0 {
            dims.map(|d| d / 2)
        } else {
            dims.map(|d| {
                let lo = (d as f64 * 0.2) as usize;
                let hi = ((d as f64 * 0.8) as usize).max(lo + 1);
                rng.random_range(lo..hi)
            })
        };
        let level = [900i16, 600, 400][s];
        spheres.push((c, r, level));
    }
    let mut data = Vec::with_capacity(dims.iter().product());
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                let noise: i16 = rng.random_range(-40..=40);
                let mut v = noise;
                for &(c, r, level) in &spheres {
                    let d2 = (i as f64 - c[0] as f64).powi(2)
                        + (j as f64 - c[1] as f64).powi(2)
                        + (k as f64 - c[2] as f64).powi(2);
                    if d2 <= r * r {
                        v = level + noise / 4;
                        break;
                    }
                }
                data.push(v);
            }
        }
    }
    let volume = Volume::new(dims, VoxelData::I16(data), Affine::diag([1.0, 1.0, 1.0]))
        .expect("phantom geometry is valid");
    Phantom {
        volume,
        centres: spheres.iter().map(|s| s.0).collect(),
    }
}

/// `n` prompt voxels spread around the first sphere's centre.
pub fn phantom_prompts(p: &Phantom, n: usize) -> Vec<VoxelIndex> {
    prompts_around(p.centres[0], p.volume.dims(), n)
}

/// `n` prompt voxels spread around `c`, clamped to `dims`.
pub fn prompts_around(c: [usize; 3], dims: [usize; 3], n: usize) -> Vec<VoxelIndex> {
    let offsets = [
        [0i64, 0, 0],
        [3, 0, 0],
        [0, 3, 0],
        [-3, 0, 0],
        [0, -3, 0],
        [0, 0, 2],
        [0, 0, -2],
    ];
    (0..n)
        .map(|i| {
            let o = offsets[i % offsets.len()];
            let ring = (i / offsets.len()) as i64;
            VoxelIndex::from_array(std::array::from_fn(|a| {
                let off = o[a] + ring * o[a].signum();
                (c[a] as i64 + off).clamp(0, dims[a] as i64 - 1) as usize
            }))
        })
        .collect()
}

fn time<T>(
    warmup: usize,
    reps: usize,
    mut setup: impl FnMut() -> T,
    mut run: impl FnMut(T) -> Result<(), BenchError>,
) -> Result<Vec<f64>, BenchError> {
    for _ in 0..warmup {
        run(setup())?;
    }
    let mut out = Vec::with_capacity(reps);
    for _ in 0..reps {
        let input = setup();
        let t = Instant::now();
        run(input)?;
        out.push(t.elapsed().as_secs_f64());
    }
    Ok(out)
}

/// Time every phase of one backend on a phantom of `dims`.
pub fn time_backend(
    registry: &Arc<BackendRegistry>,
    backend: &str,
    dims: [usize; 3],
    config: &BenchConfig,
    engine: &EngineConfig,
) -> Result<Vec<TimingReport>, BenchError> {
    let ph = phantom(dims, config.seed);
    let prompts = phantom_prompts(&ph, config.prompts.max(1));
    time_volume(registry, backend, &ph.volume, &prompts, config, engine)
}

/// Time every phase of one backend on a given volume. `prompts` are voxel
/// indices; the first one drives the cold interaction.
pub fn time_volume(
    registry: &Arc<BackendRegistry>,
    backend: &str,
    volume: &Volume,
    prompts: &[VoxelIndex],
    config: &BenchConfig,
    engine: &EngineConfig,
) -> Result<Vec<TimingReport>, BenchError> {
    if config.repetitions < 3 || config.warmup < 1 {
        return Err(BenchError::Repetitions {
            reps: config.repetitions,
            warmup: config.warmup,
        });
    }
    let b = registry.get(backend)?;
    let desc = b.descriptor().clone();
    let dims = volume.dims();
    if prompts.is_empty() {
        return Err(BenchError::NoPrompts);
    }
    let (mode, slices) = match desc.dimensionality {
        Dimensionality::Volumetric => (Mode::VolumeLevel, None),
        Dimensionality::SliceWise => (Mode::SliceLevel, Some(dims[2])),
    };
    // slice-wise backends see the prompts' slice only
    let prompts: Vec<VoxelIndex> = match mode {
        Mode::VolumeLevel => prompts.to_vec(),
        Mode::SliceLevel => {
            let k = prompts[0].k;
            prompts.iter().copied().map(|p| VoxelIndex { k, ..p }).collect()
        }
    };
    let (image, map) = fit_to_model(volume, &prompts, desc.input_dims).map_err(SessionError::from)?;
    let model_prompts = PromptSet::includes(prompts.iter().map(|&p| map_prompt(p, &map)).collect());
    let reps = config.repetitions;
    let warm = config.warmup;
    let report = |phase, s: &[f64]| TimingReport::from_samples(backend, phase, mode, dims, slices, s);
    let mut out = Vec::new();

    let enc = time(
        warm,
        reps,
        || (),
        |_| {
            b.encode(&image)?;
            Ok(())
        },
    )?;
    out.push(report(Phase::Encode, &enc));

    let embedding = b.encode(&image)?;
    let dec = time(
        warm,
        reps,
        || (),
        |_| {
            b.decode(&embedding, &model_prompts, None, &image)?;
            Ok(())
        },
    )?;
    out.push(report(Phase::Decode, &dec));

    let header = NiftiHeader::for_volume(volume);
    let fresh = || {
        Session::from_volume(
            volume.clone(),
            header.clone(),
            backend,
            registry.clone(),
            engine.clone(),
        )
        .expect("backend resolved above")
    };
    let affine = *volume.affine();
    let full = time(warm, reps, fresh, |mut s| {
        s.add_prompt(voxel_to_ras(prompts[0], &affine), PromptKind::Include)?;
        Ok(())
    })?;
    out.push(report(Phase::FullInteraction, &full));

    let prepared = || {
        let mut s = fresh();
        for &p in &prompts {
            s.add_prompt(voxel_to_ras(p, &affine), PromptKind::Include)
                .expect("phantom prompts fit the model window");
        }
        s
    };
    let ens = time(warm, reps, prepared, |mut s| {
        run_ensemble(&mut s, &config.ensemble)?;
        Ok(())
    })?;
    out.push(report(Phase::Ensemble, &ens));
    Ok(out)
}

const COLUMNS: [&str; 11] = [
    "backend",
    "mode",
    "phase",
    "dims",
    "slices",
    "reps",
    "mean_s",
    "std_s",
    "min_s",
    "max_s",
    "per_volume_s",
];

/// Comparison table plus newline-delimited JSON records, both sorted by
/// (mode, phase, mean time, backend).
pub fn report_table(reports: &[TimingReport]) -> (String, String) {
    let mut rows: Vec<&TimingReport> = reports.iter().collect();
    rows.sort_by(|a, b| {
        (a.mode, a.phase)
            .cmp(&(b.mode, b.phase))
            .then(a.mean.total_cmp(&b.mean))
            .then_with(|| a.backend.cmp(&b.backend))
    });
    let cells: Vec<[String; 11]> = rows
        .iter()
        .map(|r| {
            [
                r.backend.clone(),
                r.mode.as_str().to_string(),
                r.phase.as_str().to_string(),
                format!("{}x{}x{}", r.dims[0], r.dims[1], r.dims[2]),
                r.slices.map_or("-".into(), |s| s.to_string()),
                r.repetitions.to_string(),
                format!("{:.6}", r.mean),
                format!("{:.6}", r.std),
                format!("{:.6}", r.min),
                format!("{:.6}", r.max),
                format!("{:.6}", r.per_volume()),
            ]
        })
        .collect();
    let widths: Vec<usize> = (0..COLUMNS.len())
        .map(|c| {
            cells
                .iter()
                .map(|r| r[c].len())
                .chain([COLUMNS[c].len()])
                .max()
                .unwrap()
        })
        .collect();
    let mut table = String::new();
    let line = |t: &mut String, row: &[&str]| {
        let parts: Vec<String> = row.iter().zip(&widths).map(|(s, w)| format!("{s:<w$}")).collect();
        let _ = writeln!(t, "{}", parts.join("  ").trim_end());
    };
    line(&mut table, &COLUMNS);
    let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
    line(&mut table, &rule.iter().map(String::as_str).collect::<Vec<_>>());
    for r in &cells {
        line(&mut table, &r.iter().map(String::as_str).collect::<Vec<_>>());
    }
    let mut records = String::new();
    for r in rows {
        records.push_str(&serde_json::to_string(r).expect("reports serialize"));
        records.push('\n');
    }
    (table, records)
}

pub fn parse_records(text: &str) -> Result<Vec<TimingReport>, BenchError> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| BenchError::Record(e.to_string())))
        .collect()
}
