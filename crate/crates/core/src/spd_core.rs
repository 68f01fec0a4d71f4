//! SPD matrices, eigendecomposition, Gaussian densities and random rigid
//! transforms.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rand::Rng;

use crate::error::{Error, Result};
use crate::stats::std_normal;

pub const SYMMETRY_TOL: f64 = 1e-9;
pub const DEFINITE_TOL: f64 = 1e-12;

/// Dense symmetric positive-definite matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdMatrix {
    m: DMatrix<f64>,
}

impl SpdMatrix {
    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.m
    }

    pub fn identity(n: usize) -> Self {
        SpdMatrix { m: DMatrix::identity(n, n) }
    }

    pub fn from_row_slice(n: usize, data: &[f64]) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::DimensionMismatch { expected: n * n, got: data.len() });
        }
        validate_spd(&DMatrix::from_row_slice(n, n, data))
    }

    /// Row-major entries.
    pub fn to_row_vec(&self) -> Vec<f64> {
        let n = self.dim();
        let mut out = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                out.push(self.m[(i, j)]);
            }
        }
        out
    }

    /// Adds eps·I. Explicit opt-in only.
    pub fn regularized(&self, eps: f64) -> Result<Self> {
        let n = self.dim();
        validate_spd(&(&self.m + DMatrix::identity(n, n) * eps))
    }

    pub fn cholesky(&self) -> Result<Cholesky<f64, Dyn>> {
        Cholesky::new(self.m.clone())
            .ok_or_else(|| Error::NumericalFailure("cholesky factorization failed".into()))
    }

    pub fn log_det(&self) -> Result<f64> {
        let l = self.cholesky()?;
        Ok(2.0 * l.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>())
    }

    /// Skips validation. Callers guarantee symmetry and definiteness.
    pub(crate) fn new_unchecked(m: DMatrix<f64>) -> Self {
        SpdMatrix { m }
    }
}

/// Symmetrizes by (A + Aᵀ)/2 and checks definiteness.
pub fn validate_spd(matrix: &DMatrix<f64>) -> Result<SpdMatrix> {
    if !matrix.is_square() {
        return Err(Error::DimensionMismatch { expected: matrix.nrows(), got: matrix.ncols() });
    }
    if matrix.nrows() == 0 {
        return Err(Error::DegenerateData("empty matrix".into()));
    }
    if matrix.iter().any(|x| !x.is_finite()) {
        return Err(Error::DegenerateData("non-finite entry".into()));
    }
    let sym = (matrix + matrix.transpose()) * 0.5;
    let eig = SymmetricEigen::try_new(sym.clone(), 1e-15, 10_000)
        .ok_or_else(|| Error::NumericalFailure("eigensolver did not converge".into()))?;
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if !(min > 0.0) || min <= DEFINITE_TOL * max.abs() {
        return Err(Error::NotPositiveDefinite(min));
    }
    Ok(SpdMatrix { m: sym })
}

/// Like [`validate_spd`] but rejects inputs whose asymmetry exceeds
/// `SYMMETRY_TOL` relative to the largest entry instead of averaging it away.
pub fn validate_spd_strict(matrix: &DMatrix<f64>) -> Result<SpdMatrix> {
    if matrix.is_square() {
        let scale = matrix.amax().max(1.0);
        let asym = (matrix - matrix.transpose()).amax();
        if asym > SYMMETRY_TOL * scale {
            return Err(Error::NotSymmetric(asym));
        }
    }
    validate_spd(matrix)
}

#[derive(Debug, Clone)]
pub struct EigenDecomposition {
    /// Descending.
    pub eigenvalues: DVector<f64>,
    /// Columns aligned with `eigenvalues`.
    pub eigenvectors: DMatrix<f64>,
}

impl EigenDecomposition {
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let v = &self.eigenvectors;
        v * DMatrix::from_diagonal(&self.eigenvalues) * v.transpose()
    }
}

/// Eigendecomposition of a symmetric matrix, sorted and sign-fixed so the
/// largest-magnitude entry of each eigenvector is positive.
pub fn symmetric_eigen(m: &DMatrix<f64>, descending: bool) -> Result<EigenDecomposition> {
    let eig = SymmetricEigen::try_new(m.clone(), 1e-15, 10_000)
        .ok_or_else(|| Error::NumericalFailure("eigensolver did not converge".into()))?;
    let n = m.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let (x, y) = (eig.eigenvalues[a], eig.eigenvalues[b]);
        if descending { y.total_cmp(&x) } else { x.total_cmp(&y) }
    });
    let mut values = DVector::zeros(n);
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        values[dst] = eig.eigenvalues[src];
        let mut col = eig.eigenvectors.column(src).into_owned();
        let pivot = col.iter().cloned().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        if pivot < 0.0 {
            col.neg_mut();
        }
        vectors.set_column(dst, &col);
    }
    Ok(EigenDecomposition { eigenvalues: values, eigenvectors: vectors })
}

pub fn eigendecompose(m: &SpdMatrix) -> Result<EigenDecomposition> {
    symmetric_eigen(m.matrix(), true)
}

/// Maximum-likelihood covariance (1/M normalizer) of the rows of `points`.
pub fn sample_covariance(points: &DMatrix<f64>) -> Result<SpdMatrix> {
    let m = points.nrows();
    if m < 2 {
        return Err(Error::DegenerateData(format!("need at least 2 points, got {m}")));
    }
    let mean = points.row_mean();
    let mut centered = points.clone();
    for mut row in centered.row_iter_mut() {
        row -= &mean;
    }
    let c = centered.transpose() * &centered / m as f64;
    validate_spd(&c).map_err(|e| match e {
        Error::NotPositiveDefinite(_) => Error::DegenerateData("rank-deficient covariance".into()),
        other => other,
    })
}

/// Orthogonal rotation (possibly a reflection) with isotropic scale.
#[derive(Debug, Clone, PartialEq)]
pub struct RigidTransform {
    pub rotation: DMatrix<f64>,
    pub scale: f64,
}

impl RigidTransform {
    pub fn identity(n: usize) -> Self {
        RigidTransform { rotation: DMatrix::identity(n, n), scale: 1.0 }
    }
}

/// Q factor of a standard-normal matrix, with scale uniform in `scale_range`.
pub fn random_transform<R: Rng + ?Sized>(dim: usize, rng: &mut R, scale_range: (f64, f64)) -> RigidTransform {
    let (lo, hi) = scale_range;
    assert!(lo > 0.0 && hi >= lo, "scale range must satisfy 0 < lo <= hi");
    let g = DMatrix::from_fn(dim, dim, |_, _| std_normal(rng));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    // fix column signs so Q is Haar-distributed
    for j in 0..dim {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let scale = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    RigidTransform { rotation: q, scale }
}

/// γ·R Σ Rᵀ, i.e. (RV)(γΛ)(RV)ᵀ.
pub fn apply_transform(m: &SpdMatrix, t: &RigidTransform) -> Result<SpdMatrix> {
    if t.rotation.nrows() != m.dim() {
        return Err(Error::DimensionMismatch { expected: m.dim(), got: t.rotation.nrows() });
    }
    let r = &t.rotation;
    let out = r * m.matrix() * r.transpose() * t.scale;
    Ok(SpdMatrix::new_unchecked((&out + out.transpose()) * 0.5))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianParams {
    pub mean: DVector<f64>,
    pub covariance: SpdMatrix,
}

impl GaussianParams {
    pub fn new(mean: DVector<f64>, covariance: SpdMatrix) -> Result<Self> {
        if mean.len() != covariance.dim() {
            return Err(Error::DimensionMismatch { expected: covariance.dim(), got: mean.len() });
        }
        Ok(GaussianParams { mean, covariance })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

pub fn gaussian_logpdf(x: &DVector<f64>, g: &GaussianParams) -> Result<f64> {
    if x.len() != g.dim() {
        return Err(Error::DimensionMismatch { expected: g.dim(), got: x.len() });
    }
    Ok(GaussianDensity::new(g)?.logpdf(x.as_slice()))
}

/// Gaussian with a cached Cholesky factor, for repeated evaluation.
#[derive(Debug, Clone)]
pub struct GaussianDensity {
    mean: DVector<f64>,
    l: DMatrix<f64>,
    log_norm: f64,
}

impl GaussianDensity {
    pub fn new(g: &GaussianParams) -> Result<Self> {
        let chol = g.covariance.cholesky()?;
        let l = chol.l();
        let d = g.dim() as f64;
        let log_det: f64 = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let log_norm = -0.5 * (d * (2.0 * std::f64::consts::PI).ln() + log_det);
        Ok(GaussianDensity { mean: g.mean.clone(), l, log_norm })
    }

    pub fn logpdf(&self, x: &[f64]) -> f64 {
        let n = self.mean.len();
        // forward substitution L z = x - μ
        let mut z = vec![0.0; n];
        let mut quad = 0.0;
        for i in 0..n {
            let mut s = x[i] - self.mean[i];
            for k in 0..i {
                s -= self.l[(i, k)] * z[k];
            }
            z[i] = s / self.l[(i, i)];
            quad += z[i] * z[i];
        }
        self.log_norm - 0.5 * quad
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng_from_seed;

    #[test]
    fn identity_is_spd() {
        assert!(validate_spd(&DMatrix::identity(3, 3)).is_ok());
    }

    #[test]
    fn indefinite_rejected() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(validate_spd(&m), Err(Error::NotPositiveDefinite(_))));
    }

    #[test]
    fn asymmetric_input_is_averaged() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        let s = validate_spd(&m).unwrap();
        assert_eq!(s.matrix()[(0, 1)], 0.05);
        assert_eq!(s.matrix()[(1, 0)], 0.05);
        assert!(matches!(validate_spd_strict(&m), Err(Error::NotSymmetric(_))));
    }

    #[test]
    fn diagonal_eigen() {
        let m = SpdMatrix::from_row_slice(3, &[1.0, 0.0, 0.0, 0.0, 4.0, 0.0, 0.0, 0.0, 9.0]).unwrap();
        let e = eigendecompose(&m).unwrap();
        assert_eq!(e.eigenvalues.as_slice(), &[9.0, 4.0, 1.0]);
        assert!((e.eigenvectors[(2, 0)] - 1.0).abs() < 1e-12);
        assert!((e.eigenvectors[(0, 2)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn two_by_two_eigen() {
        let m = SpdMatrix::from_row_slice(2, &[2.0, 1.0, 1.0, 2.0]).unwrap();
        let e = eigendecompose(&m).unwrap();
        assert!((e.eigenvalues[0] - 3.0).abs() < 1e-12);
        assert!((e.eigenvalues[1] - 1.0).abs() < 1e-12);
        assert!((e.reconstruct() - m.matrix()).amax() < 1e-12);
    }

    #[test]
    fn covariance_examples() {
        let c = sample_covariance(&DMatrix::from_row_slice(2, 1, &[-1.0, 1.0])).unwrap();
        assert!((c.matrix()[(0, 0)] - 1.0).abs() < 1e-15);
        let pts = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0]);
        let c = sample_covariance(&pts).unwrap();
        assert!((c.matrix() - DMatrix::from_diagonal_element(2, 2, 0.5)).amax() < 1e-15);
        let same = DMatrix::from_element(3, 2, 1.5);
        assert!(matches!(sample_covariance(&same), Err(Error::DegenerateData(_))));
    }

    #[test]
    fn transform_determinism_and_orthogonality() {
        let a = random_transform(3, &mut rng_from_seed(9), (0.5, 2.0));
        let b = random_transform(3, &mut rng_from_seed(9), (0.5, 2.0));
        assert_eq!(a, b);
        let rtr = a.rotation.transpose() * &a.rotation;
        assert!((rtr - DMatrix::identity(3, 3)).amax() < 1e-8);
        let c = random_transform(4, &mut rng_from_seed(1), (1.0, 1.0));
        assert_eq!(c.scale, 1.0);
    }

    #[test]
    fn isotropic_transform_commutes() {
        let t = RigidTransform { scale: 4.0, ..random_transform(3, &mut rng_from_seed(3), (1.0, 1.0)) };
        let out = apply_transform(&SpdMatrix::identity(3), &t).unwrap();
        assert!((out.matrix() - DMatrix::identity(3, 3) * 4.0).amax() < 1e-12);
    }

    #[test]
    fn logpdf_examples() {
        let g = GaussianParams::new(DVector::zeros(1), SpdMatrix::identity(1)).unwrap();
        let v = gaussian_logpdf(&DVector::zeros(1), &g).unwrap();
        assert!((v + 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-14);
        let g = GaussianParams::new(DVector::from_element(1, 3.0), SpdMatrix::from_row_slice(1, &[4.0]).unwrap()).unwrap();
        let v = gaussian_logpdf(&DVector::from_element(1, 3.0), &g).unwrap();
        assert!((v + 0.5 * (2.0 * std::f64::consts::PI * 4.0).ln()).abs() < 1e-14);
    }
}
