mod common;

use common::{sized_spd_strategy, spd_strategy};
use icsc_core::datasets::gen_toy3d;
use icsc_core::rng_from_seed;
use icsc_core::similarity::*;
use icsc_core::spd_core::*;
use icsc_core::Error;
use proptest::prelude::*;
use std::f64::consts::E;

fn one(v: f64) -> SpdMatrix {
    SpdMatrix::from_row_slice(1, &[v]).unwrap()
}

#[test]
fn standard_examples() {
    let s = SpdMatrix::from_row_slice(2, &[2.0, 0.4, 0.4, 1.0]).unwrap();
    for kind in SimilarityKind::STANDARD {
        assert!(standard_similarity(kind, &s, &s).unwrap().abs() < 1e-12, "{kind:?}");
    }
    let kl = standard_similarity(SimilarityKind::Kldm, &one(2.0), &one(1.0)).unwrap();
    assert!((kl - 0.25).abs() < 1e-12);
    let le = standard_similarity(SimilarityKind::Lerm, &one(E), &one(1.0)).unwrap();
    assert!((le - 1.0).abs() < 1e-12);
}

#[test]
fn spcm_examples() {
    let s = SpdMatrix::from_row_slice(3, &[2.0, 0.5, 0.1, 0.5, 1.0, 0.2, 0.1, 0.2, 3.0]).unwrap();
    assert_eq!(spcm_delta(&s, &s).unwrap(), 0.0);
    let mut t = random_transform(3, &mut rng_from_seed(3), (1.0, 1.0));
    t.scale = 4.0;
    let scaled = apply_transform(&SpdMatrix::identity(3), &t).unwrap();
    assert!(spcm_delta(&SpdMatrix::identity(3), &scaled).unwrap() < 1e-12);
    let a = SpdMatrix::from_row_slice(2, &[4.0, 0.0, 0.0, 1.0]).unwrap();
    let d = spcm_delta(&a, &SpdMatrix::identity(2)).unwrap();
    assert!((d - 0.25).abs() < 1e-12);
}

#[test]
fn spcm_dimension_mismatch() {
    assert!(matches!(
        spcm_delta(&SpdMatrix::identity(2), &SpdMatrix::identity(3)),
        Err(Error::DimensionMismatch { .. })
    ));
}

#[test]
fn bspcm_examples() {
    let s = SpdMatrix::from_row_slice(2, &[3.0, 1.0, 1.0, 2.0]).unwrap();
    for tau in [0.0, 0.5, 1.0, 10.0] {
        assert_eq!(bspcm(&s, &s, tau).unwrap(), 1.0);
    }
    let v = bspcm_from_delta(0.25, 3, 1.0);
    let expected = 1.0 / (1.0 + 10f64.powf((-3.0f64).exp()) * 0.25);
    assert!((v - expected).abs() < 1e-12);
    assert!((v - 0.7810).abs() < 5e-5);
    for n in [1, 2, 5, 9] {
        assert!((bspcm_from_delta(0.7, n, 0.0) - 1.0 / 1.7).abs() < 1e-15);
    }
}

#[test]
fn bspcm_is_monotone() {
    for n in [2, 3, 6] {
        for tau in [0.1, 1.0, 4.0] {
            let mut last = 1.0;
            for i in 1..200 {
                let v = bspcm_from_delta(i as f64 * 0.05, n, tau);
                assert!(v < last);
                last = v;
            }
        }
    }
}

#[test]
fn pairwise_examples() {
    let single = pairwise_matrix(&[SpdMatrix::identity(2)], SimilarityKind::Bspcm, 1.0).unwrap();
    assert_eq!(single.values.as_slice(), &[1.0]);

    let ds = gen_toy3d(0);
    let s = pairwise_matrix(&ds.matrices, SimilarityKind::Bspcm, 1.0).unwrap();
    let groups = [[0usize, 1, 2].as_slice(), [3usize, 4].as_slice()];
    for g in groups {
        for &i in g {
            for &j in g {
                assert!(s.values[(i, j)] > 0.9, "within ({i},{j}) = {}", s.values[(i, j)]);
            }
        }
    }
    for &i in groups[0] {
        for &j in groups[1] {
            assert!(s.values[(i, j)] < 0.5, "across ({i},{j}) = {}", s.values[(i, j)]);
        }
    }
    for kind in [SimilarityKind::Airm, SimilarityKind::Jbld, SimilarityKind::Bspcm, SimilarityKind::Spcm] {
        let m = pairwise_matrix(&ds.matrices, kind, 1.0).unwrap();
        assert!((&m.values - m.values.transpose()).amax() <= 1e-9);
        let diag = if kind.is_distance() { 0.0 } else { 1.0 };
        assert!(m.values.diagonal().iter().all(|v| *v == diag));
    }
}

#[test]
fn kind_names_parse() {
    for kind in [SimilarityKind::Airm, SimilarityKind::Lerm, SimilarityKind::Kldm, SimilarityKind::Jbld, SimilarityKind::Spcm, SimilarityKind::Bspcm] {
        assert_eq!(kind.name().parse::<SimilarityKind>().unwrap(), kind);
    }
    assert_eq!("RIEM".parse::<SimilarityKind>().unwrap(), SimilarityKind::Airm);
    assert!("cosine".parse::<SimilarityKind>().is_err());
}

#[test]
fn near_singular_inputs_rejected_before_comparison() {
    let m = nalgebra::DMatrix::from_row_slice(2, 2, &[1e6, 0.0, 0.0, 1e-7]);
    assert!(matches!(validate_spd(&m), Err(Error::NotPositiveDefinite(_))));
    let ok = SpdMatrix::from_row_slice(2, &[1e4, 0.0, 0.0, 1e-4]).unwrap();
    assert!(standard_similarity(SimilarityKind::Airm, &ok, &SpdMatrix::identity(2)).unwrap().is_finite());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(150))]

    #[test]
    fn all_kinds_symmetric_and_nonnegative(a in spd_strategy(3), b in spd_strategy(3)) {
        for kind in SimilarityKind::STANDARD.into_iter().chain([SimilarityKind::Spcm]) {
            let ab = pair_value(kind, &a, &b, 1.0).unwrap();
            let ba = pair_value(kind, &b, &a, 1.0).unwrap();
            prop_assert!((ab - ba).abs() <= 1e-9 * ab.abs().max(1.0), "{kind:?}: {ab} vs {ba}");
            prop_assert!(ab >= 0.0);
            prop_assert!(pair_value(kind, &a, &a, 1.0).unwrap().abs() <= 1e-9);
        }
        let f = bspcm(&a, &b, 1.0).unwrap();
        prop_assert!((0.0..=1.0).contains(&f));
        prop_assert!((f - bspcm(&b, &a, 1.0).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn spcm_ignores_rotation_and_scale(m in sized_spd_strategy(2, 10), seed in any::<u64>()) {
        let t = random_transform(m.dim(), &mut rng_from_seed(seed), (0.1, 10.0));
        let moved = apply_transform(&m, &t).unwrap();
        prop_assert!(spcm_delta(&m, &moved).unwrap() <= 1e-8);
        prop_assert!(spcm_delta(&moved, &m).unwrap() <= 1e-8);
    }
}

#[test]
fn standard_metrics_see_scale_changes() {
    let mut rng = rng_from_seed(77);
    for i in 0..1000 {
        let n = 2 + i % 9;
        let entries: Vec<f64> = (0..n * n).map(|k| (((k + 3) * (i + 5)) % 17) as f64 / 17.0 - 0.5).collect();
        let m = common::spd_from(n, &entries, 0.3);
        let mut t = random_transform(n, &mut rng, (1.1, 5.0));
        if i % 2 == 1 {
            t.scale = 1.0 / t.scale;
        }
        let moved = apply_transform(&m, &t).unwrap();
        assert!(spcm_delta(&m, &moved).unwrap() <= 1e-8);
        for kind in SimilarityKind::STANDARD {
            let d = standard_similarity(kind, &m, &moved).unwrap();
            assert!(d > 1e-3, "{kind:?} case {i}: {d}");
        }
    }
}
