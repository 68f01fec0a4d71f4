//! Unsupervised spectral embedding of a similarity matrix with automatic
//! choice of the embedding dimension, plus a k-means helper for fixed-K
//! spectral clustering.

use nalgebra::DMatrix;
use rand::Rng;

use crate::error::{Error, Result};
use crate::similarity::SimilarityMatrix;
use crate::spd_core::symmetric_eigen;

const ZERO_ROW_TOL: f64 = 1e-12;
const DEGENERATE_RANGE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct EigvalWeights {
    /// Softmax of the eigenvalues.
    pub raw: Vec<f64>,
    /// `raw` min-max rescaled to [−1, 1].
    pub normalized: Vec<f64>,
}

pub fn softmax_weights(eigenvalues: &[f64]) -> Result<EigvalWeights> {
    if eigenvalues.is_empty() || eigenvalues.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("eigenvalues must be finite and non-empty".into()));
    }
    let max = eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if max - min < DEGENERATE_RANGE {
        return Err(Error::DegenerateSpectrum(max - min));
    }
    let exps: Vec<f64> = eigenvalues.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let raw: Vec<f64> = exps.iter().map(|e| e / total).collect();
    let rmax = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let rmin = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    if rmax - rmin <= 0.0 {
        return Err(Error::DegenerateSpectrum(max - min));
    }
    let normalized = raw.iter().map(|w| 2.0 * (w - rmin) / (rmax - rmin) - 1.0).collect();
    Ok(EigvalWeights { raw, normalized })
}

/// M points in P dimensions, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub dimension: usize,
    pub coords: DMatrix<f64>,
    /// Rows that were (numerically) zero before normalization and kept at zero.
    pub zero_rows: Vec<usize>,
    /// Ascending spectrum of the normalized Laplacian.
    pub laplacian_eigenvalues: Vec<f64>,
}

impl Embedding {
    pub fn source_size(&self) -> usize {
        self.coords.nrows()
    }

    /// Wraps externally computed coordinates (rows are points).
    pub fn from_coords(coords: DMatrix<f64>) -> Self {
        Embedding { dimension: coords.ncols(), coords, zero_rows: Vec::new(), laplacian_eigenvalues: Vec::new() }
    }
}

/// L_sym = I − D^(−1/2) S D^(−1/2).
pub fn normalized_laplacian(s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !s.is_square() {
        return Err(Error::InvalidSimilarity("matrix is not square".into()));
    }
    let m = s.nrows();
    let d: Vec<f64> = (0..m).map(|i| s.row(i).sum()).collect();
    if let Some(i) = d.iter().position(|v| !(*v > 0.0)) {
        return Err(Error::InvalidSimilarity(format!("row {i} has zero sum")));
    }
    let inv_sqrt: Vec<f64> = d.iter().map(|v| 1.0 / v.sqrt()).collect();
    let mut l = DMatrix::from_fn(m, m, |i, j| -inv_sqrt[i] * s[(i, j)] * inv_sqrt[j]);
    for i in 0..m {
        l[(i, i)] += 1.0;
    }
    Ok((&l + l.transpose()) * 0.5)
}

/// Number of eigenvalues whose normalized softmax weight is negative,
/// falling back to 1 when there are none or the spectrum is flat.
pub fn choose_dimension(eigenvalues: &[f64]) -> usize {
    match softmax_weights(eigenvalues) {
        Ok(w) => w.normalized.iter().filter(|v| **v < 0.0).count().max(1),
        Err(_) => 1,
    }
}

pub fn embed(s: &SimilarityMatrix) -> Result<Embedding> {
    embed_affinity(&s.to_affinity(), None)
}

/// Embedding with a caller-fixed dimension, as used by fixed-K spectral clustering.
pub fn embed_with_dimension(s: &SimilarityMatrix, p: usize) -> Result<Embedding> {
    embed_affinity(&s.to_affinity(), Some(p))
}

pub fn embed_affinity(s: &DMatrix<f64>, dimension: Option<usize>) -> Result<Embedding> {
    let l = normalized_laplacian(s)?;
    let m = l.nrows();
    let eig = symmetric_eigen(&l, false)?;
    let values: Vec<f64> = eig.eigenvalues.iter().cloned().collect();
    let p = dimension.unwrap_or_else(|| choose_dimension(&values)).clamp(1, m);
    let mut coords = eig.eigenvectors.columns(0, p).into_owned();
    let mut zero_rows = Vec::new();
    for i in 0..m {
        let norm = coords.row(i).norm();
        if norm < ZERO_ROW_TOL {
            coords.row_mut(i).fill(0.0);
            zero_rows.push(i);
        } else {
            coords.row_mut(i).unscale_mut(norm);
        }
    }
    Ok(Embedding { dimension: p, coords, zero_rows, laplacian_eigenvalues: values })
}

/// Lloyd's k-means with k-means++ seeding; best of `restarts` by inertia.
pub fn kmeans<R: Rng + ?Sized>(points: &DMatrix<f64>, k: usize, restarts: usize, rng: &mut R) -> Vec<usize> {
    let n = points.nrows();
    assert!(k >= 1 && k <= n, "k must be in 1..=n");
    let dist2 = |i: usize, c: &DMatrix<f64>, j: usize| -> f64 {
        (0..points.ncols()).map(|d| (points[(i, d)] - c[(j, d)]).powi(2)).sum()
    };
    let mut best: Option<(f64, Vec<usize>)> = None;
    for _ in 0..restarts.max(1) {
        let mut centers = DMatrix::zeros(k, points.ncols());
        let first = rng.random_range(0..n);
        centers.set_row(0, &points.row(first));
        for c in 1..k {
            let d: Vec<f64> = (0..n).map(|i| (0..c).map(|j| dist2(i, &centers, j)).fold(f64::INFINITY, f64::min)).collect();
            let total: f64 = d.iter().sum();
            let pick = if total > 0.0 {
                let mut u = rng.random::<f64>() * total;
                let mut idx = n - 1;
                for (i, di) in d.iter().enumerate() {
                    if u < *di {
                        idx = i;
                        break;
                    }
                    u -= di;
                }
                idx
            } else {
                rng.random_range(0..n)
            };
            centers.set_row(c, &points.row(pick));
        }
        let mut labels = vec![0usize; n];
        for _ in 0..300 {
            let mut changed = false;
            for i in 0..n {
                let (j, _) = (0..k)
                    .map(|j| (j, dist2(i, &centers, j)))
                    .fold((0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
                if labels[i] != j {
                    labels[i] = j;
                    changed = true;
                }
            }
            let mut sums = DMatrix::zeros(k, points.ncols());
            let mut counts = vec![0usize; k];
            for i in 0..n {
                counts[labels[i]] += 1;
                let mut row = sums.row_mut(labels[i]);
                row += points.row(i);
            }
            for j in 0..k {
                if counts[j] > 0 {
                    let row = sums.row(j) / counts[j] as f64;
                    centers.set_row(j, &row);
                }
            }
            if !changed {
                break;
            }
        }
        let inertia: f64 = (0..n).map(|i| dist2(i, &centers, labels[i])).sum();
        if best.as_ref().is_none_or(|(b, _)| inertia < *b) {
            best = Some((inertia, labels));
        }
    }
    best.map(|(_, l)| l).unwrap_or_default()
}
