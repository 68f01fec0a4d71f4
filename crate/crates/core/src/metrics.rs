//! External clustering and segmentation scores against ground truth.

use std::collections::HashMap;
use std::hash::Hash;

use pathfinding::prelude::{kuhn_munkres, Matrix};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusteringScores {
    pub purity: f64,
    pub nmi: f64,
    pub f_measure: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentationScores {
    /// Mismatch fraction after optimal label matching.
    pub hamming: f64,
    pub gce: f64,
    pub vi: f64,
}

/// Counts n[a][b] = |{i : truth_i = a, pred_i = b}| with dense label indices.
#[derive(Debug, Clone)]
pub struct Contingency {
    pub counts: Vec<Vec<usize>>,
    pub row_sums: Vec<usize>,
    pub col_sums: Vec<usize>,
    pub n: usize,
}

fn dense<T: Eq + Hash + Copy>(labels: &[T]) -> (Vec<usize>, usize) {
    let mut map = HashMap::new();
    let out = labels
        .iter()
        .map(|l| {
            let next = map.len();
            *map.entry(*l).or_insert(next)
        })
        .collect();
    (out, map.len())
}

impl Contingency {
    pub fn new<T: Eq + Hash + Copy, U: Eq + Hash + Copy>(a: &[T], b: &[U]) -> Result<Self> {
        if a.len() != b.len() {
            return Err(Error::LengthMismatch(a.len(), b.len()));
        }
        if a.is_empty() {
            return Err(Error::DegenerateData("empty labeling".into()));
        }
        let (da, ka) = dense(a);
        let (db, kb) = dense(b);
        let mut counts = vec![vec![0usize; kb]; ka];
        for (x, y) in da.iter().zip(&db) {
            counts[*x][*y] += 1;
        }
        let row_sums = counts.iter().map(|r| r.iter().sum()).collect();
        let col_sums = (0..kb).map(|j| counts.iter().map(|r| r[j]).sum()).collect();
        Ok(Contingency { counts, row_sums, col_sums, n: a.len() })
    }

    fn entropy(sums: &[usize], n: usize) -> f64 {
        let n = n as f64;
        -sums.iter().filter(|c| **c > 0).map(|c| {
            let p = *c as f64 / n;
            p * p.ln()
        }).sum::<f64>()
    }

    pub fn entropy_rows(&self) -> f64 {
        Self::entropy(&self.row_sums, self.n)
    }

    pub fn entropy_cols(&self) -> f64 {
        Self::entropy(&self.col_sums, self.n)
    }

    pub fn mutual_information(&self) -> f64 {
        let n = self.n as f64;
        let mut mi = 0.0;
        for (a, row) in self.counts.iter().enumerate() {
            for (b, &c) in row.iter().enumerate() {
                if c > 0 {
                    let c = c as f64;
                    mi += c / n * (c * n / (self.row_sums[a] as f64 * self.col_sums[b] as f64)).ln();
                }
            }
        }
        mi.max(0.0)
    }
}

/// Purity, NMI and F-measure of `pred` against `truth`.
pub fn clustering_scores<T: Eq + Hash + Copy, U: Eq + Hash + Copy>(truth: &[T], pred: &[U]) -> Result<ClusteringScores> {
    let c = Contingency::new(truth, pred)?;
    let n = c.n as f64;
    // each cluster credited with its majority class
    let purity = (0..c.col_sums.len())
        .map(|k| c.counts.iter().map(|r| r[k]).max().unwrap_or(0))
        .sum::<usize>() as f64
        / n;
    let (hs, hc) = (c.entropy_rows(), c.entropy_cols());
    let nmi = if hs + hc == 0.0 {
        // both sides are a single block, so the partitions coincide
        1.0
    } else {
        (c.mutual_information() / ((hs + hc) / 2.0)).clamp(0.0, 1.0)
    };
    let mut f = 0.0;
    for (j, row) in c.counts.iter().enumerate() {
        let sj = c.row_sums[j] as f64;
        let best = row
            .iter()
            .enumerate()
            .filter(|(_, v)| **v > 0)
            .map(|(k, &v)| {
                let (p, r) = (v as f64 / c.col_sums[k] as f64, v as f64 / sj);
                2.0 * p * r / (p + r)
            })
            .fold(0.0, f64::max);
        f += sj * best;
    }
    Ok(ClusteringScores { purity, nmi, f_measure: (f / n).min(1.0) })
}

/// Largest total overlap achievable by a one-to-one label matching.
pub fn matched_overlap(c: &Contingency) -> usize {
    let rows = c.counts.len();
    let cols = c.col_sums.len();
    let k = rows.max(cols);
    let mut w = Matrix::new(k, k, 0i64);
    for a in 0..rows {
        for b in 0..cols {
            w[(a, b)] = c.counts[a][b] as i64;
        }
    }
    let (total, _) = kuhn_munkres(&w);
    total as usize
}

/// Global consistency error: (1/n)·min(Σᵢ E(A,B,i), Σᵢ E(B,A,i)).
pub fn gce_from(c: &Contingency) -> f64 {
    let mut ab = 0.0;
    let mut ba = 0.0;
    for (a, row) in c.counts.iter().enumerate() {
        for (b, &v) in row.iter().enumerate() {
            if v == 0 {
                continue;
            }
            let v = v as f64;
            let (ra, cb) = (c.row_sums[a] as f64, c.col_sums[b] as f64);
            ab += v * (ra - v) / ra;
            ba += v * (cb - v) / cb;
        }
    }
    ab.min(ba) / c.n as f64
}

pub fn segmentation_scores<T: Eq + Hash + Copy, U: Eq + Hash + Copy>(truth: &[T], pred: &[U]) -> Result<SegmentationScores> {
    let c = Contingency::new(truth, pred)?;
    let hamming = (c.n - matched_overlap(&c)) as f64 / c.n as f64;
    let vi = (c.entropy_rows() + c.entropy_cols() - 2.0 * c.mutual_information()).max(0.0);
    Ok(SegmentationScores { hamming, gce: gce_from(&c), vi })
}
