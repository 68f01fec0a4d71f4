mod common;

use common::spd_strategy;
use icsc_core::similarity::{pairwise_matrix, SimilarityKind, SimilarityMatrix};
use icsc_core::spd_core::symmetric_eigen;
use icsc_core::spectral_embedding::*;
use icsc_core::Error;
use nalgebra::DMatrix;
use proptest::prelude::*;

fn distances(y: &DMatrix<f64>) -> DMatrix<f64> {
    let m = y.nrows();
    DMatrix::from_fn(m, m, |i, j| (y.row(i) - y.row(j)).norm())
}

fn blocks(sizes: &[usize]) -> SimilarityMatrix {
    let m: usize = sizes.iter().sum();
    let mut owner = Vec::new();
    for (b, &s) in sizes.iter().enumerate() {
        owner.extend(std::iter::repeat_n(b, s));
    }
    SimilarityMatrix::from_values(DMatrix::from_fn(m, m, |i, j| if owner[i] == owner[j] { 1.0 } else { 0.0 })).unwrap()
}

#[test]
fn softmax_examples() {
    assert!(matches!(softmax_weights(&[0.0, 0.0, 0.0]), Err(Error::DegenerateSpectrum(_))));
    let w = softmax_weights(&[0.0, 2f64.ln()]).unwrap();
    assert!((w.raw[0] - 1.0 / 3.0).abs() < 1e-15 && (w.raw[1] - 2.0 / 3.0).abs() < 1e-15);
    assert_eq!(w.normalized, vec![-1.0, 1.0]);
    let w = softmax_weights(&[0.1, 0.7, 1.3, 1.9, 0.2]).unwrap();
    assert!((w.raw.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn all_ones_collapses_to_one_point() {
    let s = SimilarityMatrix::from_values(DMatrix::from_element(4, 4, 1.0)).unwrap();
    let e = embed(&s).unwrap();
    for i in 1..4 {
        assert!((e.coords.row(i) - e.coords.row(0)).norm() < 1e-9);
    }
}

#[test]
fn two_blocks_separate() {
    let e = embed(&blocks(&[2, 2])).unwrap();
    let d = distances(&e.coords);
    assert!(d[(0, 1)] < 1e-9 && d[(2, 3)] < 1e-9);
    assert!(d[(0, 2)] > 0.5);
}

#[test]
fn identity_falls_back_to_one_dimension() {
    let e = embed(&SimilarityMatrix::from_values(DMatrix::identity(2, 2)).unwrap()).unwrap();
    assert_eq!(e.dimension, 1);
    assert_eq!(e.coords.ncols(), 1);
}

#[test]
fn zero_row_sum_rejected() {
    let mut v = DMatrix::from_element(3, 3, 1.0);
    v.row_mut(2).fill(0.0);
    v.column_mut(2).fill(0.0);
    let s = SimilarityMatrix::from_values(v).unwrap();
    assert!(matches!(embed(&s), Err(Error::InvalidSimilarity(_))));
}

#[test]
fn block_structure_gives_k_distinct_rows() {
    for sizes in [vec![3, 2], vec![4, 1, 2], vec![2, 3, 5, 1]] {
        let k = sizes.len();
        let e = embed(&blocks(&sizes)).unwrap();
        let d = distances(&e.coords);
        let mut reps: Vec<usize> = Vec::new();
        for i in 0..d.nrows() {
            if !reps.iter().any(|&r| d[(r, i)] < 1e-8) {
                reps.push(i);
            }
        }
        assert_eq!(reps.len(), k, "sizes {sizes:?}");
    }
}

#[test]
fn fixed_dimension_is_respected() {
    let e = embed_with_dimension(&blocks(&[2, 2, 2]), 2).unwrap();
    assert_eq!(e.dimension, 2);
    for (i, r) in e.coords.row_iter().enumerate() {
        let expected = if e.zero_rows.contains(&i) { 0.0 } else { 1.0 };
        assert!((r.norm() - expected).abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(60))]

    #[test]
    fn laplacian_spectrum_and_embedding_shape(mats in prop::collection::vec(spd_strategy(3), 3..12)) {
        let s = pairwise_matrix(&mats, SimilarityKind::Bspcm, 1.0).unwrap();
        let l = normalized_laplacian(&s.values).unwrap();
        let eig = symmetric_eigen(&l, false).unwrap();
        prop_assert!(eig.eigenvalues.iter().all(|v| *v >= -1e-9 && *v <= 2.0 + 1e-9));
        let e = embed(&s).unwrap();
        prop_assert!(e.dimension >= 1 && e.dimension <= mats.len());
        for (i, r) in e.coords.row_iter().enumerate() {
            if !e.zero_rows.contains(&i) {
                prop_assert!((r.norm() - 1.0).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn embedding_is_permutation_equivariant(
        mats in prop::collection::vec(spd_strategy(3), 4..10),
        seed in any::<u64>(),
    ) {
        let m = mats.len();
        let mut perm: Vec<usize> = (0..m).collect();
        let mut state = seed;
        for i in (1..m).rev() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (state >> 33) as usize % (i + 1));
        }
        let s = pairwise_matrix(&mats, SimilarityKind::Bspcm, 1.0).unwrap();
        let permuted = SimilarityMatrix::from_values(DMatrix::from_fn(m, m, |i, j| s.values[(perm[i], perm[j])])).unwrap();
        let a = embed(&s).unwrap();
        let b = embed(&permuted).unwrap();
        prop_assert_eq!(a.dimension, b.dimension);
        // skip inputs whose retained eigenspace is (nearly) degenerate
        let gap_ok = a.laplacian_eigenvalues.windows(2).take(a.dimension).all(|w| (w[1] - w[0]).abs() > 1e-6);
        prop_assume!(gap_ok);
        let da = distances(&a.coords);
        let db = distances(&b.coords);
        for i in 0..m {
            for j in 0..m {
                prop_assert!((da[(perm[i], perm[j])] - db[(i, j)]).abs() <= 1e-8);
            }
        }
    }
}
