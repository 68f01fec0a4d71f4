//! Pairwise similarity and distance functions between SPD matrices.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spd_core::{eigendecompose, symmetric_eigen, SpdMatrix};

/// Largest condition number accepted by the inverse-based metrics.
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimilarityKind {
    /// Affine-invariant Riemannian metric (also reported as RIEM).
    Airm,
    /// Log-Euclidean Riemannian metric.
    Lerm,
    /// Symmetrized Kullback-Leibler divergence.
    Kldm,
    /// Jensen-Bregman LogDet divergence.
    Jbld,
    /// Raw SPCM dissimilarity Δ.
    Spcm,
    /// Bounded SPCM similarity in [0, 1].
    Bspcm,
}

impl SimilarityKind {
    pub const STANDARD: [SimilarityKind; 4] =
        [SimilarityKind::Airm, SimilarityKind::Lerm, SimilarityKind::Kldm, SimilarityKind::Jbld];

    /// True for dissimilarities (zero diagonal), false for similarities.
    pub fn is_distance(self) -> bool {
        !matches!(self, SimilarityKind::Bspcm)
    }

    pub fn name(self) -> &'static str {
        match self {
            SimilarityKind::Airm => "airm",
            SimilarityKind::Lerm => "lerm",
            SimilarityKind::Kldm => "kldm",
            SimilarityKind::Jbld => "jbld",
            SimilarityKind::Spcm => "spcm",
            SimilarityKind::Bspcm => "bspcm",
        }
    }
}

impl std::str::FromStr for SimilarityKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "airm" | "riem" => Ok(SimilarityKind::Airm),
            "lerm" => Ok(SimilarityKind::Lerm),
            "kldm" => Ok(SimilarityKind::Kldm),
            "jbld" => Ok(SimilarityKind::Jbld),
            "spcm" => Ok(SimilarityKind::Spcm),
            "bspcm" | "b-spcm" => Ok(SimilarityKind::Bspcm),
            other => Err(Error::InvalidArgument(format!("unknown similarity kind `{other}`"))),
        }
    }
}

/// Norms of the spectral polytope axes, ‖X_k‖ = √λ_k, descending.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralAxes {
    pub norms: Vec<f64>,
}

impl SpectralAxes {
    pub fn of(m: &SpdMatrix) -> Result<Self> {
        let e = eigendecompose(m)?;
        Ok(SpectralAxes { norms: e.eigenvalues.iter().map(|l| l.max(0.0).sqrt()).collect() })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HomothetyStats {
    pub ratios: Vec<f64>,
    pub mean: f64,
    /// Population variance.
    pub variance: f64,
}

impl HomothetyStats {
    /// Element-wise ratios ‖X_a,k‖ / ‖X_b,k‖.
    pub fn between(a: &SpectralAxes, b: &SpectralAxes) -> Self {
        let ratios: Vec<f64> = a.norms.iter().zip(&b.norms).map(|(x, y)| x / y).collect();
        let n = ratios.len() as f64;
        let mean = ratios.iter().sum::<f64>() / n;
        let variance = ratios.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
        HomothetyStats { ratios, mean, variance }
    }
}

fn check_dims(a: &SpdMatrix, b: &SpdMatrix) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch { expected: a.dim(), got: b.dim() });
    }
    Ok(())
}

/// Δ from precomputed axes.
pub fn spcm_delta_axes(a: &SpectralAxes, b: &SpectralAxes) -> f64 {
    let ab = HomothetyStats::between(a, b);
    let ba = HomothetyStats::between(b, a);
    let delta = ab.mean - ba.mean;
    let h = 0.5 * (1.0 + sign(delta));
    h * ab.variance + (1.0 - h) * ba.variance
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// SPCM dissimilarity Δ(a, b) ≥ 0; zero iff the spectra are homothetic.
pub fn spcm_delta(a: &SpdMatrix, b: &SpdMatrix) -> Result<f64> {
    check_dims(a, b)?;
    Ok(spcm_delta_axes(&SpectralAxes::of(a)?, &SpectralAxes::of(b)?))
}

/// υ(τ) = 10^(τ·e^(−N)).
pub fn bspcm_scaling(tau: f64, n: usize) -> f64 {
    10f64.powf(tau * (-(n as f64)).exp())
}

pub fn bspcm_from_delta(delta: f64, n: usize, tau: f64) -> f64 {
    1.0 / (1.0 + bspcm_scaling(tau, n) * delta)
}

pub fn bspcm(a: &SpdMatrix, b: &SpdMatrix, tau: f64) -> Result<f64> {
    Ok(bspcm_from_delta(spcm_delta(a, b)?, a.dim(), tau))
}

fn condition_number(m: &SpdMatrix) -> Result<(f64, Vec<f64>, DMatrix<f64>)> {
    let e = eigendecompose(m)?;
    let max = e.eigenvalues[0];
    let min = e.eigenvalues[e.eigenvalues.len() - 1];
    let cond = max / min;
    if !(min > 0.0) || cond > MAX_CONDITION {
        return Err(Error::NumericalFailure(format!("condition number {cond:e} exceeds {MAX_CONDITION:e}")));
    }
    Ok((cond, e.eigenvalues.as_slice().to_vec(), e.eigenvectors))
}

fn log_spd(values: &[f64], vectors: &DMatrix<f64>) -> DMatrix<f64> {
    let d = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(values.len(), values.iter().map(|v| v.ln())));
    vectors * d * vectors.transpose()
}

fn solve(a: &SpdMatrix, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(a.cholesky()?.solve(b))
}

/// One of the four standard SPD distances.
pub fn standard_similarity(kind: SimilarityKind, a: &SpdMatrix, b: &SpdMatrix) -> Result<f64> {
    check_dims(a, b)?;
    let n = a.dim();
    match kind {
        SimilarityKind::Airm => {
            condition_number(a)?;
            condition_number(b)?;
            // eigenvalues of L⁻¹ B L⁻ᵀ are the generalized eigenvalues of (B, A)
            let l = a.cholesky()?.l();
            let li = l
                .solve_lower_triangular(&DMatrix::identity(n, n))
                .ok_or_else(|| Error::NumericalFailure("triangular solve failed".into()))?;
            let c = &li * b.matrix() * li.transpose();
            let c = (&c + c.transpose()) * 0.5;
            let e = symmetric_eigen(&c, true)?;
            Ok(e.eigenvalues.iter().map(|v| v.ln().powi(2)).sum::<f64>().sqrt())
        }
        SimilarityKind::Lerm => {
            let (_, va, ea) = condition_number(a)?;
            let (_, vb, eb) = condition_number(b)?;
            Ok((log_spd(&va, &ea) - log_spd(&vb, &eb)).norm())
        }
        SimilarityKind::Kldm => {
            condition_number(a)?;
            condition_number(b)?;
            let ab = solve(a, b.matrix())?;
            let ba = solve(b, a.matrix())?;
            Ok((0.5 * (ab.trace() + ba.trace() - 2.0 * n as f64)).max(0.0))
        }
        SimilarityKind::Jbld => {
            let mid = crate::spd_core::validate_spd(&((a.matrix() + b.matrix()) * 0.5))?;
            let v = mid.log_det()? - 0.5 * (a.log_det()? + b.log_det()?);
            Ok(v.max(0.0))
        }
        SimilarityKind::Spcm => spcm_delta(a, b),
        SimilarityKind::Bspcm => Err(Error::InvalidArgument("bspcm is not a standard distance".into())),
    }
}

/// Dispatch on `kind`; `tau` is only used by B-SPCM.
pub fn pair_value(kind: SimilarityKind, a: &SpdMatrix, b: &SpdMatrix, tau: f64) -> Result<f64> {
    match kind {
        SimilarityKind::Bspcm => bspcm(a, b, tau),
        other => standard_similarity(other, a, b),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub values: DMatrix<f64>,
    pub kind: SimilarityKind,
    pub tau: Option<f64>,
}

impl SimilarityMatrix {
    pub fn size(&self) -> usize {
        self.values.nrows()
    }

    /// Wraps a user-supplied similarity matrix (treated as B-SPCM-like).
    pub fn from_values(values: DMatrix<f64>) -> Result<Self> {
        if !values.is_square() {
            return Err(Error::InvalidSimilarity("matrix is not square".into()));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidSimilarity("entries must be finite and non-negative".into()));
        }
        if (&values - values.transpose()).amax() > 1e-9 {
            return Err(Error::InvalidSimilarity("matrix is not symmetric".into()));
        }
        Ok(SimilarityMatrix { values, kind: SimilarityKind::Bspcm, tau: None })
    }

    /// Affinity matrix for spectral embedding. Similarities pass through;
    /// distances go through a Gaussian kernel exp(−d²/2σ²) with σ the median
    /// off-diagonal distance.
    pub fn to_affinity(&self) -> DMatrix<f64> {
        if !self.kind.is_distance() {
            return self.values.clone();
        }
        let m = self.size();
        let mut off: Vec<f64> = Vec::with_capacity(m * m.saturating_sub(1) / 2);
        for i in 0..m {
            for j in (i + 1)..m {
                off.push(self.values[(i, j)]);
            }
        }
        let sigma = if off.is_empty() {
            1.0
        } else {
            off.sort_by(|a, b| a.total_cmp(b));
            let med = off[off.len() / 2];
            if med > 0.0 { med } else { 1.0 }
        };
        self.values.map(|d| (-d * d / (2.0 * sigma * sigma)).exp())
    }
}

/// M×M matrix over `data`, computed for i < j and mirrored.
pub fn pairwise_matrix(data: &[SpdMatrix], kind: SimilarityKind, tau: f64) -> Result<SimilarityMatrix> {
    if data.is_empty() {
        return Err(Error::DegenerateData("empty dataset".into()));
    }
    let n = data[0].dim();
    if let Some(bad) = data.iter().find(|m| m.dim() != n) {
        return Err(Error::DimensionMismatch { expected: n, got: bad.dim() });
    }
    let m = data.len();
    let diag = if kind.is_distance() { 0.0 } else { 1.0 };
    let mut values = DMatrix::from_element(m, m, diag);
    if matches!(kind, SimilarityKind::Spcm | SimilarityKind::Bspcm) {
        let axes = data.iter().map(SpectralAxes::of).collect::<Result<Vec<_>>>()?;
        for i in 0..m {
            for j in (i + 1)..m {
                let d = spcm_delta_axes(&axes[i], &axes[j]);
                let v = if kind == SimilarityKind::Bspcm { bspcm_from_delta(d, n, tau) } else { d };
                values[(i, j)] = v;
                values[(j, i)] = v;
            }
        }
    } else {
        for i in 0..m {
            for j in (i + 1)..m {
                let v = standard_similarity(kind, &data[i], &data[j])?;
                values[(i, j)] = v;
                values[(j, i)] = v;
            }
        }
    }
    let tau = (kind == SimilarityKind::Bspcm).then_some(tau);
    Ok(SimilarityMatrix { values, kind, tau })
}
