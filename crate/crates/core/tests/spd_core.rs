mod common;

use common::{max_abs_diff, spd_strategy, sized_spd_strategy};
use icsc_core::rng_from_seed;
use icsc_core::spd_core::*;
use icsc_core::Error;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use std::f64::consts::PI;

#[test]
fn validation_examples() {
    assert!(validate_spd(&DMatrix::identity(3, 3)).is_ok());
    let indefinite = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
    assert!(matches!(validate_spd(&indefinite), Err(Error::NotPositiveDefinite(_))));
    let skew = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
    let m = validate_spd(&skew).unwrap();
    assert_eq!(m.matrix(), &DMatrix::from_row_slice(2, 2, &[1.0, 0.05, 0.05, 1.0]));
    assert!(matches!(validate_spd_strict(&skew), Err(Error::NotSymmetric(_))));
}

#[test]
fn non_finite_entries_rejected() {
    let m = DMatrix::from_row_slice(2, 2, &[1.0, f64::NAN, f64::NAN, 1.0]);
    assert!(validate_spd(&m).is_err());
}

#[test]
fn eigen_examples() {
    let d = SpdMatrix::from_row_slice(3, &[1.0, 0.0, 0.0, 0.0, 4.0, 0.0, 0.0, 0.0, 9.0]).unwrap();
    let e = eigendecompose(&d).unwrap();
    assert_eq!(e.eigenvalues.as_slice(), &[9.0, 4.0, 1.0]);
    for (col, axis) in [(0, 2), (1, 1), (2, 0)] {
        assert!((e.eigenvectors[(axis, col)].abs() - 1.0).abs() < 1e-12);
    }
    let e = eigendecompose(&SpdMatrix::identity(5)).unwrap();
    assert!(e.eigenvalues.iter().all(|v| (v - 1.0).abs() < 1e-12));
    let m = SpdMatrix::from_row_slice(2, &[2.0, 1.0, 1.0, 2.0]).unwrap();
    let e = eigendecompose(&m).unwrap();
    assert!((e.eigenvalues[0] - 3.0).abs() < 1e-12 && (e.eigenvalues[1] - 1.0).abs() < 1e-12);
}

#[test]
fn eigenvector_signs_are_canonical() {
    let m = SpdMatrix::from_row_slice(2, &[2.0, -1.0, -1.0, 2.0]).unwrap();
    let e = eigendecompose(&m).unwrap();
    for col in e.eigenvectors.column_iter() {
        let big = col.iter().cloned().fold(0.0f64, |a, v| if v.abs() > a.abs() { v } else { a });
        assert!(big > 0.0);
    }
}

#[test]
fn sample_covariance_examples() {
    let c = sample_covariance(&DMatrix::from_row_slice(2, 1, &[-1.0, 1.0])).unwrap();
    assert!((c.matrix()[(0, 0)] - 1.0).abs() < 1e-15);
    let same = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
    assert!(matches!(sample_covariance(&same), Err(Error::DegenerateData(_))));
    let pts = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0]);
    let c = sample_covariance(&pts).unwrap();
    assert!(max_abs_diff(c.matrix(), &DMatrix::from_diagonal_element(2, 2, 0.5)) < 1e-15);
}

#[test]
fn random_transform_examples() {
    let a = random_transform(3, &mut rng_from_seed(9), (0.5, 2.0));
    let b = random_transform(3, &mut rng_from_seed(9), (0.5, 2.0));
    assert_eq!(a, b);
    let t = random_transform(4, &mut rng_from_seed(1), (1.0, 1.0));
    assert_eq!(t.scale, 1.0);
    let r = &t.rotation;
    assert!(max_abs_diff(&(r.transpose() * r), &DMatrix::identity(4, 4)) <= 1e-8);
    assert!((r.determinant().abs() - 1.0).abs() <= 1e-8);
}

#[test]
fn apply_transform_examples() {
    let s = SpdMatrix::from_row_slice(2, &[2.0, 0.3, 0.3, 1.0]).unwrap();
    let same = apply_transform(&s, &RigidTransform::identity(2)).unwrap();
    assert!(max_abs_diff(same.matrix(), s.matrix()) < 1e-12);
    let mut rng = rng_from_seed(4);
    let mut t = random_transform(3, &mut rng, (1.0, 1.0));
    t.scale = 4.0;
    let out = apply_transform(&SpdMatrix::identity(3), &t).unwrap();
    assert!(max_abs_diff(out.matrix(), &(DMatrix::identity(3, 3) * 4.0)) < 1e-12);
}

#[test]
fn logpdf_examples() {
    let g = GaussianParams::new(DVector::zeros(1), SpdMatrix::identity(1)).unwrap();
    let v = gaussian_logpdf(&DVector::zeros(1), &g).unwrap();
    assert!((v + 0.5 * (2.0 * PI).ln()).abs() < 1e-14);
    let g = GaussianParams::new(DVector::from_element(1, 3.0), SpdMatrix::from_row_slice(1, &[4.0]).unwrap()).unwrap();
    let v = gaussian_logpdf(&DVector::from_element(1, 3.0), &g).unwrap();
    assert!((v + 0.5 * (2.0 * PI * 4.0).ln()).abs() < 1e-14);
}

#[test]
fn gaussian_dimension_mismatch() {
    assert!(GaussianParams::new(DVector::zeros(3), SpdMatrix::identity(2)).is_err());
}

fn dense_logpdf(x: &DVector<f64>, mu: &DVector<f64>, s: &DMatrix<f64>) -> f64 {
    let n = x.len() as f64;
    let d = x - mu;
    let inv = s.clone().try_inverse().unwrap();
    -0.5 * (n * (2.0 * PI).ln() + s.determinant().ln() + (d.transpose() * inv * &d)[(0, 0)])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn eigendecomposition_reconstructs(m in sized_spd_strategy(1, 8)) {
        let e = eigendecompose(&m).unwrap();
        let n = m.dim();
        prop_assert!(max_abs_diff(&e.reconstruct(), m.matrix()) <= 1e-8 * m.matrix().norm().max(1.0));
        prop_assert!(max_abs_diff(&(e.eigenvectors.transpose() * &e.eigenvectors), &DMatrix::identity(n, n)) <= 1e-8);
        prop_assert!(e.eigenvalues.as_slice().windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn transform_scales_spectrum(m in spd_strategy(4), seed in any::<u64>()) {
        let t = random_transform(4, &mut rng_from_seed(seed), (0.2, 5.0));
        let out = apply_transform(&m, &t).unwrap();
        let a = eigendecompose(&m).unwrap().eigenvalues;
        let b = eigendecompose(&out).unwrap().eigenvalues;
        for (x, y) in a.iter().zip(b.iter()) {
            prop_assert!((x * t.scale - y).abs() <= 1e-8 * y.max(1.0));
        }
    }

    #[test]
    fn logpdf_matches_dense_inverse(m in sized_spd_strategy(2, 5), shift in -3.0f64..3.0, off in -2.0f64..2.0) {
        let n = m.dim();
        let mu = DVector::from_fn(n, |i, _| shift + i as f64 * 0.3);
        let x = DVector::from_fn(n, |i, _| off - i as f64 * 0.2);
        let g = GaussianParams::new(mu.clone(), m.clone()).unwrap();
        let ours = gaussian_logpdf(&x, &g).unwrap();
        prop_assert!((ours - dense_logpdf(&x, &mu, m.matrix())).abs() <= 1e-10 * ours.abs().max(1.0));
        let t = DVector::from_element(n, 1.7);
        let moved = GaussianParams::new(&mu + &t, m.clone()).unwrap();
        prop_assert!((gaussian_logpdf(&(&x + &t), &moved).unwrap() - ours).abs() <= 1e-10);
    }
}

#[test]
fn transform_preserves_definiteness() {
    let mut rng = rng_from_seed(2024);
    for i in 0..1000 {
        let n = 2 + i % 9;
        let t = random_transform(n, &mut rng, (0.1, 10.0));
        let entries: Vec<f64> = (0..n * n).map(|k| ((k * 7 + i) % 13) as f64 / 13.0 - 0.5).collect();
        let m = common::spd_from(n, &entries, 0.05);
        let out = apply_transform(&m, &t).unwrap();
        assert!(validate_spd(out.matrix()).is_ok());
    }
}
