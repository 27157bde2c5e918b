use proptest::prelude::*;
use voxprompt_core::backend::{ReferenceBackend, ReferenceParams};
use voxprompt_core::{
    binarize, Affine, BackendDescriptor, Dimensionality, LogitVolume, PromptSet, SegmentationBackend, Volume,
    VoxelData, VoxelIndex,
};

const N: usize = 16;

fn backend(params: ReferenceParams) -> ReferenceBackend {
    let d = BackendDescriptor {
        name: "ref16".into(),
        input_dims: [N; 3],
        stride: [4; 3],
        dimensionality: Dimensionality::Volumetric,
    };
    ReferenceBackend::new(d, params).unwrap()
}

fn volume_strategy() -> impl Strategy<Value = Volume> {
    prop_oneof![
        prop::collection::vec(-1000.0f32..1000.0, N * N * N).prop_map(VoxelData::F32),
        prop::collection::vec(-30i16..30, N * N * N).prop_map(VoxelData::I16),
    ]
    .prop_map(|d| Volume::new([N; 3], d, Affine::identity()).unwrap())
}

fn voxel() -> impl Strategy<Value = VoxelIndex> {
    prop::array::uniform3(0..N).prop_map(VoxelIndex::from_array)
}

fn prev_strategy() -> impl Strategy<Value = Option<LogitVolume>> {
    prop::option::of(
        prop::collection::vec(-12.0f64..12.0, N * N * N)
            .prop_map(|v| LogitVolume::from_vec([N; 3], v).unwrap()),
    )
}

/// The decoder formula, evaluated directly at every voxel.
fn oracle(image: &Volume, prompts: &PromptSet, prev: Option<&LogitVolume>, p: &ReferenceParams) -> Vec<f64> {
    let (lo, hi) = image.range();
    let sigma_i = p.sigma_i.unwrap_or(p.sigma_i_fraction * (hi - lo));
    let s = |x: [usize; 3], q: VoxelIndex| -> f64 {
        let d2: f64 = (0..3)
            .map(|a| (x[a] as f64 - q.as_array()[a] as f64).powi(2))
            .sum();
        let di = image.get(x[0], x[1], x[2]) - image.get(q.i, q.j, q.k);
        let ik = if sigma_i > 0.0 {
            (-(di * di) / (2.0 * sigma_i * sigma_i)).exp()
        } else if di == 0.0 {
            1.0
        } else {
            0.0
        };
        p.w_d * (-d2 / (2.0 * p.sigma_d * p.sigma_d)).exp() + p.w_i * ik
    };
    let mut out = Vec::with_capacity(N * N * N);
    for k in 0..N {
        for j in 0..N {
            for i in 0..N {
                let x = [i, j, k];
                let inc = prompts
                    .include
                    .iter()
                    .map(|&q| s(x, q))
                    .fold(f64::NEG_INFINITY, f64::max);
                let exc = prompts
                    .exclude
                    .iter()
                    .map(|&q| s(x, q))
                    .fold(f64::NEG_INFINITY, f64::max);
                let exc = if prompts.exclude.is_empty() { 0.0 } else { exc };
                let pv = prev.map_or(0.0, |l| p.gamma * l.get(i, j, k).tanh());
                out.push(inc - exc + pv);
            }
        }
    }
    out
}

fn params_strategy() -> impl Strategy<Value = ReferenceParams> {
    (
        1.0f64..6.0,
        0.0f64..6.0,
        2.0f64..20.0,
        0.0f64..0.3,
        0.0f64..2.0,
        any::<bool>(),
    )
        .prop_map(|(w_d, w_i, sigma_d, frac, gamma, codebook)| ReferenceParams {
            w_d,
            w_i,
            sigma_d,
            sigma_i_fraction: frac,
            gamma,
            codebook_limit: if codebook { 1 << 16 } else { 0 },
            ..ReferenceParams::default()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn decode_matches_formula(
        v in volume_strategy(),
        inc in prop::collection::vec(voxel(), 1..=4),
        exc in prop::collection::vec(voxel(), 0..=2),
        prev in prev_strategy(),
        params in prop_oneof![Just(ReferenceParams::default()), params_strategy()],
    ) {
        let b = backend(params.clone());
        let prompts = PromptSet::new(inc, exc);
        let e = b.encode(&v).unwrap();
        let got = b.decode(&e, &prompts, prev.as_ref(), &v).unwrap();
        let want = oracle(&v, &prompts, prev.as_ref(), &params);
        let err = got.values.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(err < 1e-9, "max abs error {err}");
    }

    #[test]
    fn prompt_monotonicity(
        v in volume_strategy(),
        inc in prop::collection::vec(voxel(), 1..=3),
        exc in prop::collection::vec(voxel(), 0..=2),
        prev in prev_strategy(),
        added in voxel(),
    ) {
        let b = backend(ReferenceParams::default());
        let e = b.encode(&v).unwrap();
        let base = PromptSet::new(inc.clone(), exc.clone());
        let before = b.decode(&e, &base, prev.as_ref(), &v).unwrap().get(added.i, added.j, added.k);

        let mut more_inc = base.clone();
        more_inc.include.push(added);
        let after = b.decode(&e, &more_inc, prev.as_ref(), &v).unwrap().get(added.i, added.j, added.k);
        prop_assert!(after >= before);

        let mut more_exc = base;
        more_exc.exclude.push(added);
        let after = b.decode(&e, &more_exc, prev.as_ref(), &v).unwrap().get(added.i, added.j, added.k);
        prop_assert!(after <= before);
    }

    #[test]
    fn locality_on_constant_volume(c in -100.0f32..100.0, p in voxel()) {
        let v = Volume::from_fn([N; 3], Affine::identity(), |_, _, _| c).unwrap();
        let b = backend(ReferenceParams::default());
        let l = b.decode(&b.encode(&v).unwrap(), &PromptSet::includes(vec![p]), None, &v).unwrap();
        let mut by_dist: Vec<(usize, f64)> = (0..l.len())
            .map(|idx| {
                let x = voxprompt_core::volume::unravel([N; 3], idx);
                let d2 = (0..3).map(|a| (x[a] as i64 - p.as_array()[a] as i64).pow(2) as usize).sum();
                (d2, l.values[idx])
            })
            .collect();
        by_dist.sort_by_key(|a| a.0);
        for w in by_dist.windows(2) {
            if w[0].0 < w[1].0 {
                prop_assert!(w[0].1 >= w[1].1);
            } else {
                prop_assert_eq!(w[0].1, w[1].1);
            }
        }
    }

    #[test]
    fn encode_decode_deterministic(v in volume_strategy(), inc in prop::collection::vec(voxel(), 1..=3)) {
        let b = backend(ReferenceParams::default());
        let e1 = b.encode(&v).unwrap();
        let e2 = b.encode(&v.clone()).unwrap();
        prop_assert_eq!(&e1, &e2);
        let p = PromptSet::includes(inc);
        let a = b.decode(&e1, &p, None, &v).unwrap();
        let c = b.decode(&e2, &p, None, &v).unwrap();
        prop_assert!(a.values.iter().zip(&c.values).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn binarize_matches_threshold_loop(
        values in prop::collection::vec(prop_oneof![-5.0f64..5.0, Just(0.0), Just(0.5)], 512),
        tau in prop_oneof![Just(0.0), Just(0.5), -2.0f64..2.0],
    ) {
        let l = LogitVolume::from_vec([8; 3], values).unwrap();
        let m = binarize(&l, tau);
        for (i, &v) in l.values.iter().enumerate() {
            prop_assert_eq!(m.values[i], if v > tau { 1 } else { 0 });
        }
    }
}
