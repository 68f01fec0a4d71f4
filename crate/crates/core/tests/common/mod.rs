#![allow(dead_code)]

pub mod hmm;
pub mod labels;

use icsc_core::spd_core::{validate_spd, SpdMatrix};
use nalgebra::DMatrix;
use proptest::prelude::*;

/// A·Aᵀ + shift·I from row-major entries of A.
pub fn spd_from(n: usize, entries: &[f64], shift: f64) -> SpdMatrix {
    let a = DMatrix::from_row_slice(n, n, entries);
    validate_spd(&(&a * a.transpose() + DMatrix::identity(n, n) * shift)).unwrap()
}

pub fn spd_strategy(n: usize) -> impl Strategy<Value = SpdMatrix> {
    prop::collection::vec(-2.0f64..2.0, n * n).prop_map(move |e| spd_from(n, &e, 0.5))
}

pub fn sized_spd_strategy(lo: usize, hi: usize) -> impl Strategy<Value = SpdMatrix> {
    (lo..=hi).prop_flat_map(spd_strategy)
}

pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax()
}
