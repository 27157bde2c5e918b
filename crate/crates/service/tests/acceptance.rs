//! Acceptance suite. Prints one `[PASS]`/`[FAIL]` line per criterion and
//! exits non-zero when any criterion fails.

use std::collections::VecDeque;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{header, Method, Request, StatusCode};
use axum::Router;
use nalgebra::{Matrix4, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tower::ServiceExt;
use voxprompt_core::backend::{ReferenceBackend, ReferenceParams};
use voxprompt_core::bench::{time_backend, BenchConfig, Phase, TimingReport};
use voxprompt_core::geometry::{
    crop_field, fit_to_model, plan_window, ras_to_voxel, restore_mask, voxel_to_ras,
};
use voxprompt_core::nifti::{write_nifti_gz, Endianness};
use voxprompt_core::uncertainty::ensemble_statistics;
use voxprompt_core::{
    binarize, read_nifti, run_ensemble, sample_prompts, write_nifti, Affine, BackendDescriptor,
    BackendRegistry, Dimensionality, EngineConfig, EnsembleConfig, LogitVolume, NiftiHeader, PromptKind,
    PromptSet, RasPoint, SegmentationBackend, Session, Volume, VoxelData, VoxelIndex,
};
use voxprompt_service::routes::merge_ensemble;
use voxprompt_service::{app_state, router, AppState, ServiceConfig};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        // negated so that NaN fails
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn within(start: Instant, limit: Duration) -> Result<(), String> {
    let t = start.elapsed();
    if t < limit {
        Ok(())
    } else {
        Err(format!(
            "took {:.2} s, limit {:.0} s",
            t.as_secs_f64(),
            limit.as_secs_f64()
        ))
    }
}

fn reference_registry() -> Arc<BackendRegistry> {
    Arc::new(BackendRegistry::with_reference(ReferenceParams::default()))
}

// ---- thresholding ----

fn binarize_oracle() -> Outcome {
    let start = Instant::now();
    let mut r = rng(1);
    for _ in 0..200 {
        let tau = match r.random_range(0..3) {
            0 => 0.0,
            1 => 0.5,
            _ => r.random_range(-2.0..2.0),
        };
        let values: Vec<f64> = (0..512)
            .map(|_| match r.random_range(0..6) {
                0 => 0.0,
                1 => tau,
                _ => r.random_range(-5.0..5.0),
            })
            .collect();
        let l = LogitVolume::from_vec([8; 3], values).unwrap();
        let m = binarize(&l, tau);
        for (i, &v) in l.values.iter().enumerate() {
            let want = if v > tau { 1 } else { 0 };
            ensure!(
                m.values[i] == want,
                "voxel {i}: logit {v}, tau {tau}, got {}",
                m.values[i]
            );
        }
    }
    within(start, Duration::from_secs(1))?;
    Ok("200 volumes of 8^3, exact".into())
}

// ---- ensemble statistics ----

fn two_pass(stack: &[LogitVolume]) -> (Vec<f64>, Vec<f64>) {
    let n = stack.len() as f64;
    let len = stack[0].len();
    let mean: Vec<f64> = (0..len)
        .map(|i| stack.iter().map(|m| m.values[i]).sum::<f64>() / n)
        .collect();
    let std = (0..len)
        .map(|i| (stack.iter().map(|m| (m.values[i] - mean[i]).powi(2)).sum::<f64>() / n).sqrt())
        .collect();
    (mean, std)
}

fn blob_session(points: &[[usize; 3]]) -> Session {
    let v = Volume::from_fn([32, 32, 32], Affine::diag([0.8, 0.8, 1.2]), |i, j, k| {
        let d2 = (i as f64 - 14.0).powi(2) + (j as f64 - 17.0).powi(2) + (k as f64 - 15.0).powi(2);
        if d2 < 49.0 {
            120.0 + (i % 3) as f32
        } else {
            ((i * 13 + j * 7 + k * 3) % 17) as f32
        }
    })
    .unwrap();
    let h = NiftiHeader::for_volume(&v);
    let mut s = Session::from_volume(
        v,
        h,
        "reference-3d-lite",
        reference_registry(),
        EngineConfig::default(),
    )
    .unwrap();
    for &p in points {
        let ras = voxel_to_ras(VoxelIndex::from_array(p), s.volume().affine());
        s.add_prompt(ras, PromptKind::Include).unwrap();
    }
    s
}

/// Members rebuilt from public pieces, independent of the session's own
/// ensemble loop.
fn replay_members(s: &Session, cfg: &EnsembleConfig) -> Vec<LogitVolume> {
    let backend = reference_registry().get("reference-3d-lite").unwrap();
    let prompts: Vec<VoxelIndex> = s.prompts(PromptKind::Include).iter().map(|p| p.voxel).collect();
    let (image, map) = fit_to_model(s.volume(), &prompts, [64; 3]).unwrap();
    let embedding = backend.encode(&image).unwrap();
    let m0 = binarize(&crop_field(s.working_logits().unwrap(), &map, -10.0), cfg.tau);
    let k = cfg.k.unwrap_or(prompts.len());
    (1..=cfg.n as u64)
        .map(|run| {
            let p = sample_prompts(&m0, k, cfg.seed, run).unwrap();
            let l = backend.decode(&embedding, &p, None, &image).unwrap();
            restore_mask(&l, &map, s.volume().dims(), -10.0).unwrap()
        })
        .collect()
}

fn ensemble_oracle() -> Outcome {
    let start = Instant::now();
    let mut r = rng(2);
    let mut worst: f64 = 0.0;
    for case in 0..200 {
        let n = [2, 3, 5, 9][case % 4];
        let stack: Vec<LogitVolume> = (0..n)
            .map(|_| {
                LogitVolume::from_vec([8; 3], (0..512).map(|_| r.random_range(-20.0..20.0)).collect())
                    .unwrap()
            })
            .collect();
        let (mean, std) = ensemble_statistics(&stack).map_err(|e| e.to_string())?;
        let (m2, s2) = two_pass(&stack);
        worst = worst
            .max(max_abs(&mean.values, &m2))
            .max(max_abs(&std.values, &s2));
    }
    ensure!(worst < 1e-9, "random stacks: max abs error {worst:e}");
    for (n, seed) in [(2, 1), (3, 2), (5, 3), (9, 4)] {
        let mut s = blob_session(&[[14, 17, 15], [12, 15, 16]]);
        let cfg = EnsembleConfig {
            n,
            seed,
            ..EnsembleConfig::default()
        };
        run_ensemble(&mut s, &cfg).map_err(|e| e.to_string())?;
        let (m2, s2) = two_pass(&replay_members(&s, &cfg));
        let e = s.ensemble().unwrap();
        let err = max_abs(&e.mean.values, &m2).max(max_abs(&e.uncertainty.values, &s2));
        ensure!(err < 1e-9, "session ensemble N={n}: max abs error {err:e}");
        worst = worst.max(err);
    }
    within(start, Duration::from_secs(10))?;
    Ok(format!(
        "200 stacks + 4 session ensembles, max abs error {worst:.1e}"
    ))
}

fn zero_variance() -> Outcome {
    let mut r = rng(3);
    let base =
        LogitVolume::from_vec([8; 3], (0..512).map(|_| r.random_range(-20.0..20.0)).collect()).unwrap();
    for n in [2, 3, 5, 9] {
        let (mean, std) = ensemble_statistics(&vec![base.clone(); n]).map_err(|e| e.to_string())?;
        ensure!(
            std.values.iter().all(|&v| v == 0.0),
            "identical stack N={n} has non-zero std"
        );
        ensure!(
            mean == base,
            "identical stack N={n}: mean differs from the member"
        );
    }
    // every member sees the whole initial foreground, so all members agree
    let mut s = blob_session(&[[14, 17, 15]]);
    let mut tau = 7.5;
    while binarize(s.working_logits().unwrap(), tau).foreground_count() > 40 {
        tau += 0.01;
    }
    let fg = binarize(s.working_logits().unwrap(), tau).foreground_count();
    let cfg = EnsembleConfig {
        n: 5,
        k: Some(fg),
        tau,
        ..EnsembleConfig::default()
    };
    run_ensemble(&mut s, &cfg).map_err(|e| e.to_string())?;
    let u = &s.ensemble().unwrap().uncertainty;
    ensure!(
        u.values.iter().all(|&v| v == 0.0),
        "full-foreground ensemble has non-zero std"
    );
    Ok(format!(
        "identical stacks and a k = |foreground| = {fg} session ensemble, std == 0 exactly"
    ))
}

// ---- encode-once ----

fn encode_once() -> Outcome {
    let mut ensembles = 0;
    for seed in 0..4 {
        let mut s = blob_session(&[[14, 17, 15], [12, 15, 16]]);
        let before = s.encode_calls();
        let cfg = EnsembleConfig {
            n: 5,
            seed,
            ..EnsembleConfig::default()
        };
        run_ensemble(&mut s, &cfg).map_err(|e| e.to_string())?;
        ensure!(s.encode_calls() == before, "run_ensemble called the encoder");
        ensembles += 1;
    }

    // A volume larger than the window on two axes, so windows move. The
    // session cache is checked against a model LRU of window keys.
    let dims = [100, 90, 40];
    let v = Volume::from_fn(dims, Affine::diag([1.0, 1.0, 2.0]), |i, j, k| {
        ((i * 5 + j * 3 + k) % 29) as f32
    })
    .unwrap();
    let engine = EngineConfig::default();
    let capacity = engine.cache_entries;
    let mut r = rng(4);
    let mut adds = 0;
    let mut same_window = 0;
    for _ in 0..30 {
        let h = NiftiHeader::for_volume(&v);
        let mut s = Session::from_volume(
            v.clone(),
            h,
            "reference-3d-lite",
            reference_registry(),
            engine.clone(),
        )
        .unwrap();
        let mut model: VecDeque<_> = VecDeque::new();
        let mut last = None;
        let centres: Vec<[usize; 3]> = (0..3)
            .map(|_| {
                [
                    r.random_range(10..90),
                    r.random_range(10..80),
                    r.random_range(5..35),
                ]
            })
            .collect();
        for _ in 0..12 {
            let c = centres[r.random_range(0..3)];
            let p = std::array::from_fn(|a| (c[a] + r.random_range(0..8)).saturating_sub(4).min(dims[a] - 1));
            let kind = if r.random_range(0..4) == 0 {
                PromptKind::Exclude
            } else {
                PromptKind::Include
            };
            let calls = s.encode_calls();
            if s.add_prompt(voxel_to_ras(VoxelIndex::from_array(p), s.volume().affine()), kind)
                .is_err()
            {
                ensure!(s.encode_calls() == calls, "a rejected prompt called the encoder");
                continue;
            }
            adds += 1;
            let delta = s.encode_calls() - calls;
            if s.prompts(PromptKind::Include).is_empty() {
                ensure!(delta == 0, "exclude-only prompt set called the encoder");
                continue;
            }
            let mut all: Vec<VoxelIndex> = s.prompts(PromptKind::Include).iter().map(|p| p.voxel).collect();
            all.extend(s.prompts(PromptKind::Exclude).iter().map(|p| p.voxel));
            let key = plan_window(dims, &all, [64; 3]).map_err(|e| e.to_string())?.key();
            let resident = model.iter().position(|k| *k == key);
            let expected = u64::from(resident.is_none());
            ensure!(
                delta == expected,
                "window {key:?}: {delta} encodes, expected {expected}"
            );
            ensure!(delta <= 1, "more than one encode for one prompt");
            if last == Some(key) {
                same_window += 1;
                ensure!(delta == 0, "unchanged window re-encoded");
            }
            if let Some(pos) = resident {
                model.remove(pos);
            }
            model.push_back(key);
            while model.len() > capacity {
                model.pop_front();
            }
            last = Some(key);
        }
    }
    Ok(format!(
        "{ensembles} ensembles with 0 encodes; {adds} prompts over 30 sequences, {same_window} on an unchanged window, none re-encoded"
    ))
}

// ---- geometry ----

fn random_affine(r: &mut ChaCha8Rng) -> Affine {
    loop {
        let a = Affine::from_rows(std::array::from_fn(|_| {
            [
                r.random_range(-3.0..3.0),
                r.random_range(-3.0..3.0),
                r.random_range(-3.0..3.0),
                r.random_range(-200.0..200.0),
            ]
        }));
        if a.det3().abs() > 0.05 {
            return a;
        }
    }
}

fn geometry_round_trips() -> Outcome {
    let mut r = rng(5);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let a = random_affine(&mut r);
        let v: [usize; 3] = std::array::from_fn(|_| r.random_range(0..64));
        let idx = VoxelIndex::from_array(v);
        let p = voxel_to_ras(idx, &a);
        let inv = Matrix4::from_fn(|i, j| a.0[i][j])
            .try_inverse()
            .ok_or("oracle inverse failed")?;
        let h = inv * Vector4::new(p.x, p.y, p.z, 1.0);
        let ours = a.inverse().ok_or("inverse failed")?.apply(p.as_array());
        for ax in 0..3 {
            worst = worst
                .max((ours[ax] - v[ax] as f64).abs())
                .max((ours[ax] - h[ax]).abs());
        }
        ensure!(
            ras_to_voxel(p, &a, [64; 3]).map_err(|e| e.to_string())? == idx,
            "ras_to_voxel({p:?}) != {idx:?}"
        );
    }
    ensure!(worst < 1e-6, "RAS/voxel max error {worst:e}");

    for _ in 0..100 {
        let src: [usize; 3] = std::array::from_fn(|_| r.random_range(1..40));
        let target: [usize; 3] = std::array::from_fn(|_| r.random_range(1..40));
        let base: [usize; 3] = std::array::from_fn(|a| r.random_range(0..src[a]));
        let prompts: Vec<VoxelIndex> = (0..r.random_range(1..5))
            .map(|_| {
                VoxelIndex::from_array(std::array::from_fn(|a| {
                    base[a] + r.random_range(0..target[a].min(src[a] - base[a]))
                }))
            })
            .collect();
        let vol = Volume::from_fn(src, Affine::identity(), |i, j, k| {
            (1 + i + 100 * j + 10_000 * k) as f32
        })
        .unwrap();
        let (model, map) = fit_to_model(&vol, &prompts, target).map_err(|e| e.to_string())?;
        let logits = LogitVolume::from_vec(target, model.data().to_f64_vec()).unwrap();
        let back = restore_mask(&logits, &map, src, -10.0).map_err(|e| e.to_string())?;
        for k in 0..src[2] {
            for j in 0..src[1] {
                for i in 0..src[0] {
                    let m = [
                        i as i64 - map.offset[0],
                        j as i64 - map.offset[1],
                        k as i64 - map.offset[2],
                    ];
                    let inside = (0..3).all(|a| m[a] >= 0 && m[a] < target[a] as i64);
                    let want = if inside { vol.get(i, j, k) } else { -10.0 };
                    ensure!(
                        back.get(i, j, k) == want,
                        "src {src:?} target {target:?}: voxel ({i},{j},{k})"
                    );
                }
            }
        }
    }
    Ok(format!(
        "1000 affines, max error {worst:.1e}; 100 fit/restore configs exact"
    ))
}

// ---- NIfTI ----

fn nifti_round_trip() -> Outcome {
    let mut r = rng(6);
    let mut worst: f64 = 0.0;
    for case in 0..100 {
        let dims: [usize; 3] = std::array::from_fn(|_| r.random_range(1..8));
        let n = dims.iter().product();
        let affine = loop {
            let a = Affine::from_rows(std::array::from_fn(|_| {
                std::array::from_fn(|c| r.random_range(-16..=16) as f64 / if c == 3 { 0.4 } else { 4.0 })
            }));
            if a.det3().abs() > 1e-3 {
                break a;
            }
        };
        let data = if case % 2 == 0 {
            VoxelData::I16((0..n).map(|_| r.random()).collect())
        } else {
            VoxelData::F32((0..n).map(|_| r.random_range(-1e4f32..1e4)).collect())
        };
        let v = Volume::new(dims, data, affine).unwrap();
        let header = NiftiHeader {
            endianness: if r.random() {
                Endianness::Big
            } else {
                Endianness::Little
            },
            ..NiftiHeader::for_volume(&v)
        };
        let bytes = if r.random() {
            write_nifti_gz(&v, &header)
        } else {
            write_nifti(&v, &header)
        }
        .map_err(|e| e.to_string())?;
        let (back, _) = read_nifti(&bytes).map_err(|e| e.to_string())?;
        ensure!(
            back.data().to_le_bytes() == v.data().to_le_bytes(),
            "case {case}: payload differs"
        );
        for row in 0..4 {
            for c in 0..4 {
                worst = worst.max((back.affine().0[row][c] - v.affine().0[row][c]).abs());
            }
        }
    }
    ensure!(worst < 1e-6, "affine error {worst:e}");
    Ok(format!("100 volumes bitwise, affine max error {worst:.1e}"))
}

// ---- reference decoder ----

fn ref16(params: ReferenceParams) -> ReferenceBackend {
    let d = BackendDescriptor {
        name: "ref16".into(),
        input_dims: [16; 3],
        stride: [4; 3],
        dimensionality: Dimensionality::Volumetric,
    };
    ReferenceBackend::new(d, params).unwrap()
}

fn random_volume16(r: &mut ChaCha8Rng) -> Volume {
    let data = if r.random() {
        VoxelData::F32((0..4096).map(|_| r.random_range(-1000.0..1000.0)).collect())
    } else {
        VoxelData::I16((0..4096).map(|_| r.random_range(-30..30)).collect())
    };
    Volume::new([16; 3], data, Affine::identity()).unwrap()
}

fn random_voxel(r: &mut ChaCha8Rng) -> VoxelIndex {
    VoxelIndex::new(
        r.random_range(0..16),
        r.random_range(0..16),
        r.random_range(0..16),
    )
}

fn formula(image: &Volume, prompts: &PromptSet, prev: Option<&LogitVolume>, p: &ReferenceParams) -> Vec<f64> {
    let (lo, hi) = image.range();
    let si = p.sigma_i.unwrap_or(p.sigma_i_fraction * (hi - lo));
    let s = |x: [usize; 3], q: VoxelIndex| {
        let d2: f64 = (0..3)
            .map(|a| (x[a] as f64 - q.as_array()[a] as f64).powi(2))
            .sum();
        let di = image.get(x[0], x[1], x[2]) - image.get(q.i, q.j, q.k);
        let ik = if si > 0.0 {
            (-(di * di) / (2.0 * si * si)).exp()
        } else {
            f64::from(u8::from(di == 0.0))
        };
        p.w_d * (-d2 / (2.0 * p.sigma_d * p.sigma_d)).exp() + p.w_i * ik
    };
    let mut out = Vec::with_capacity(4096);
    for k in 0..16 {
        for j in 0..16 {
            for i in 0..16 {
                let x = [i, j, k];
                let inc = prompts
                    .include
                    .iter()
                    .map(|&q| s(x, q))
                    .fold(f64::NEG_INFINITY, f64::max);
                let exc = prompts.exclude.iter().map(|&q| s(x, q)).fold(0.0, f64::max);
                out.push(inc - exc + prev.map_or(0.0, |l| p.gamma * l.get(i, j, k).tanh()));
            }
        }
    }
    out
}

fn decode_oracle() -> Outcome {
    let mut r = rng(7);
    let mut worst: f64 = 0.0;
    for case in 0..40 {
        let params = if case % 4 == 0 {
            ReferenceParams::default()
        } else {
            ReferenceParams {
                w_d: r.random_range(1.0..6.0),
                w_i: r.random_range(0.0..6.0),
                sigma_d: r.random_range(2.0..20.0),
                sigma_i_fraction: r.random_range(0.0..0.3),
                gamma: r.random_range(0.0..2.0),
                codebook_limit: if r.random() { 1 << 16 } else { 0 },
                ..ReferenceParams::default()
            }
        };
        let v = random_volume16(&mut r);
        let inc = (0..r.random_range(1..=4)).map(|_| random_voxel(&mut r)).collect();
        let exc = (0..r.random_range(0..=2)).map(|_| random_voxel(&mut r)).collect();
        let prompts = PromptSet::new(inc, exc);
        let prev = r.random::<bool>().then(|| {
            LogitVolume::from_vec([16; 3], (0..4096).map(|_| r.random_range(-12.0..12.0)).collect()).unwrap()
        });
        let b = ref16(params.clone());
        let e = b.encode(&v).map_err(|e| e.to_string())?;
        let got = b
            .decode(&e, &prompts, prev.as_ref(), &v)
            .map_err(|e| e.to_string())?;
        worst = worst.max(max_abs(
            &got.values,
            &formula(&v, &prompts, prev.as_ref(), &params),
        ));
    }
    ensure!(worst < 1e-9, "max abs error {worst:e}");
    Ok(format!("40 random 16^3 cases, max abs error {worst:.1e}"))
}

fn monotonicity() -> Outcome {
    let mut r = rng(8);
    let b = ref16(ReferenceParams::default());
    for case in 0..100 {
        let v = random_volume16(&mut r);
        let e = b.encode(&v).map_err(|e| e.to_string())?;
        let base = PromptSet::new(
            (0..r.random_range(1..=3)).map(|_| random_voxel(&mut r)).collect(),
            (0..r.random_range(0..=2)).map(|_| random_voxel(&mut r)).collect(),
        );
        let prev = r.random::<bool>().then(|| {
            LogitVolume::from_vec([16; 3], (0..4096).map(|_| r.random_range(-12.0..12.0)).collect()).unwrap()
        });
        let q = random_voxel(&mut r);
        let at = |p: &PromptSet| b.decode(&e, p, prev.as_ref(), &v).map(|l| l.get(q.i, q.j, q.k));
        let before = at(&base).map_err(|e| e.to_string())?;
        let mut inc = base.clone();
        inc.include.push(q);
        let mut exc = base.clone();
        exc.exclude.push(q);
        let up = at(&inc).map_err(|e| e.to_string())?;
        let down = at(&exc).map_err(|e| e.to_string())?;
        ensure!(up >= before, "case {case}: include lowered {before} -> {up}");
        ensure!(down <= before, "case {case}: exclude raised {before} -> {down}");
    }
    Ok("100 cases".into())
}

// ---- latency ----

fn latency() -> Outcome {
    let start = Instant::now();
    let reports = time_backend(
        &reference_registry(),
        "reference-3d",
        [128; 3],
        &BenchConfig::default(),
        &EngineConfig::default(),
    )
    .map_err(|e| e.to_string())?;
    let mean = |phase| -> Result<f64, String> {
        reports
            .iter()
            .find(|r: &&TimingReport| r.phase == phase)
            .map(|r| r.mean)
            .ok_or_else(|| format!("no {} report", phase.as_str()))
    };
    let (enc, dec, full, ens) = (
        mean(Phase::Encode)?,
        mean(Phase::Decode)?,
        mean(Phase::FullInteraction)?,
        mean(Phase::Ensemble)?,
    );
    let detail = format!("encode {enc:.4} s, decode {dec:.4} s, full {full:.3} s, ensemble(5) {ens:.3} s");
    ensure!(dec < enc, "decode not cheaper than encode: {detail}");
    ensure!(
        ens < 5.0 * (enc + dec),
        "ensemble above 5 x (encode + decode): {detail}"
    );
    ensure!(full < 2.0, "full interaction above 2 s: {detail}");
    within(start, Duration::from_secs(120))?;
    Ok(detail)
}

// ---- replay ----

const SCRIPT: [([usize; 3], PromptKind); 3] = [
    ([24, 20, 18], PromptKind::Include),
    ([27, 22, 17], PromptKind::Include),
    ([8, 30, 10], PromptKind::Exclude),
];

fn replay_volume() -> Vec<u8> {
    let v = Volume::from_fn(
        [48, 40, 36],
        Affine::from_rows([
            [0.9, 0.1, 0.0, -20.0],
            [0.0, 1.1, 0.0, 5.0],
            [0.0, 0.0, 1.4, 30.0],
        ]),
        |i, j, k| {
            let d2 = (i as f64 - 25.0).powi(2) + (j as f64 - 21.0).powi(2) + (k as f64 - 18.0).powi(2);
            if d2 < 60.0 {
                700.0 - d2 as f32
            } else {
                ((i * 17 + j * 5 + k * 11) % 37) as f32
            }
        },
    )
    .unwrap();
    write_nifti(&v, &NiftiHeader::for_volume(&v)).unwrap()
}

fn ras_of(v: [usize; 3], affine: &Affine) -> RasPoint {
    voxel_to_ras(VoxelIndex::from_array(v), affine)
}

fn script_ensemble() -> Value {
    json!({"n": 5, "seed": 7})
}

/// Scripted session in process: create, three prompts, remove one,
/// ensemble, commit, export.
fn replay_in_process(bytes: &[u8], config: &ServiceConfig) -> Result<(Vec<u8>, [u8; 32]), String> {
    let registry = config.build_registry().map_err(|e| e.to_string())?;
    let mut s = Session::create(bytes, "reference-3d-lite", registry, config.engine.clone())
        .map_err(|e| e.to_string())?;
    let affine = *s.volume().affine();
    for (v, kind) in SCRIPT {
        s.add_prompt(ras_of(v, &affine), kind)
            .map_err(|e| e.to_string())?;
    }
    s.remove_prompt(PromptKind::Include, 1)
        .map_err(|e| e.to_string())?;
    let cfg = merge_ensemble(&config.engine.ensemble, script_ensemble()).map_err(|e| e.message)?;
    run_ensemble(&mut s, &cfg).map_err(|e| e.to_string())?;
    let id = s
        .commit_mask("object", config.engine.tau)
        .map_err(|e| e.to_string())?;
    let out = s.export_mask(id, false).map_err(|e| e.to_string())?;
    Ok((out, s.state_digest().0))
}

async fn request(
    app: &Router,
    method: Method,
    uri: &str,
    body: Body,
    json: bool,
) -> Result<(StatusCode, Vec<u8>), String> {
    let mut b = Request::builder().method(method).uri(uri);
    if json {
        b = b.header(header::CONTENT_TYPE, "application/json");
    }
    let res = app
        .clone()
        .oneshot(b.body(body).unwrap())
        .await
        .map_err(|e| e.to_string())?;
    let status = res.status();
    let bytes = axum::body::to_bytes(res.into_body(), usize::MAX)
        .await
        .map_err(|e| e.to_string())?;
    Ok((status, bytes.to_vec()))
}

async fn replay_http(bytes: &[u8], state: AppState) -> Result<(Vec<u8>, [u8; 32]), String> {
    let app = router(state.clone());
    let expect = |status: StatusCode, want: StatusCode, body: &[u8]| -> Result<Value, String> {
        let v: Value = serde_json::from_slice(body).unwrap_or(Value::Null);
        if status == want {
            Ok(v)
        } else {
            Err(format!("HTTP {status}: {v}"))
        }
    };
    let (st, body) = request(
        &app,
        Method::POST,
        "/sessions?backend=reference-3d-lite",
        Body::from(bytes.to_vec()),
        false,
    )
    .await?;
    let created = expect(st, StatusCode::CREATED, &body)?;
    let id = created["id"].as_str().ok_or("no id")?.to_string();
    let affine: Affine =
        serde_json::from_value(created["summary"]["affine"].clone()).map_err(|e| e.to_string())?;
    let mut revisions = vec![0];
    for (v, kind) in SCRIPT {
        let body = json!({"point": ras_of(v, &affine), "kind": kind}).to_string();
        let (st, b) = request(
            &app,
            Method::POST,
            &format!("/sessions/{id}/prompts"),
            Body::from(body),
            true,
        )
        .await?;
        revisions.push(
            expect(st, StatusCode::OK, &b)?["revision"]
                .as_u64()
                .ok_or("no revision")?,
        );
    }
    let (st, b) = request(
        &app,
        Method::DELETE,
        &format!("/sessions/{id}/prompts/include/1"),
        Body::empty(),
        false,
    )
    .await?;
    revisions.push(
        expect(st, StatusCode::OK, &b)?["revision"]
            .as_u64()
            .ok_or("no revision")?,
    );
    let (st, b) = request(
        &app,
        Method::POST,
        &format!("/sessions/{id}/uncertainty"),
        Body::from(script_ensemble().to_string()),
        true,
    )
    .await?;
    revisions.push(
        expect(st, StatusCode::OK, &b)?["revision"]
            .as_u64()
            .ok_or("no revision")?,
    );
    let (st, b) = request(
        &app,
        Method::POST,
        &format!("/sessions/{id}/masks"),
        Body::from(json!({"label": "object"}).to_string()),
        true,
    )
    .await?;
    let m = expect(st, StatusCode::CREATED, &b)?;
    revisions.push(m["revision"].as_u64().ok_or("no revision")?);
    if revisions.windows(2).any(|w| w[1] <= w[0]) {
        return Err(format!("revisions not strictly increasing: {revisions:?}"));
    }
    let (st, exported) = request(
        &app,
        Method::GET,
        &format!("/sessions/{id}/export/{}", m["mask_id"]),
        Body::empty(),
        false,
    )
    .await?;
    if st != StatusCode::OK {
        return Err(format!("export: HTTP {st}"));
    }
    let digest = state
        .get(&id)
        .map_err(|e| e.message)?
        .read(|s| Ok(s.state_digest().0))
        .await
        .map_err(|e| e.message)?;
    Ok((exported, digest))
}

fn replay_determinism() -> Outcome {
    let bytes = replay_volume();
    let config = ServiceConfig {
        default_backend: "reference-3d-lite".into(),
        ..ServiceConfig::default()
    };
    let a = replay_in_process(&bytes, &config)?;
    let b = replay_in_process(&bytes, &config)?;
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| e.to_string())?;
    let c = rt.block_on(replay_http(
        &bytes,
        app_state(config.clone()).map_err(|e| e.to_string())?,
    ))?;
    let d = rt.block_on(replay_http(&bytes, app_state(config).map_err(|e| e.to_string())?))?;
    ensure!(a == b, "two in-process runs differ");
    ensure!(c == d, "two HTTP runs differ");
    ensure!(a.0 == c.0, "HTTP export differs from in-process export");
    ensure!(a.1 == c.1, "HTTP session state differs from in-process state");
    let (mask, _) = read_nifti(&a.0).map_err(|e| e.to_string())?;
    let fg = mask.data().to_f64_vec().iter().filter(|&&v| v != 0.0).count();
    ensure!(fg > 0, "exported mask is empty");
    Ok(format!(
        "4 runs, {} byte export identical, {fg} foreground voxels, state digests equal",
        a.0.len()
    ))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("binarize equals the strict-threshold loop", binarize_oracle),
        ("ensemble mean/std equal the two-pass oracle", ensemble_oracle),
        ("identical members give zero uncertainty", zero_variance),
        (
            "encoder runs once per fit window, never in ensembles",
            encode_once,
        ),
        ("RAS/voxel and fit/restore round trips", geometry_round_trips),
        ("NIfTI write/read round trip", nifti_round_trip),
        ("reference decoder equals the brute-force formula", decode_oracle),
        ("prompt monotonicity at the prompt voxel", monotonicity),
        ("latency structure on a 128^3 phantom", latency),
        (
            "scripted session replays identically over HTTP and in process",
            replay_determinism,
        ),
    ];
    let mut failed = 0;
    for (n, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("[PASS] {:>2} {name} ({secs:.2} s): {detail}", n + 1),
            Err(why) => {
                failed += 1;
                println!("[FAIL] {:>2} {name} ({secs:.2} s): {why}", n + 1);
            }
        }
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
