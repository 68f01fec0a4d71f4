use icsc_core::spd_core::{gaussian_logpdf, GaussianParams, SpdMatrix};
use nalgebra::{DMatrix, DVector};

pub fn gauss(mean: &[f64], var: f64) -> GaussianParams {
    let n = mean.len();
    GaussianParams::new(DVector::from_column_slice(mean), SpdMatrix::from_row_slice(n, &{
        let mut v = vec![0.0; n * n];
        (0..n).for_each(|i| v[i * n + i] = var);
        v
    }).unwrap())
    .unwrap()
}

pub fn active(f_row: &[bool]) -> Vec<usize> {
    (0..f_row.len()).filter(|k| f_row[*k]).collect()
}

/// log p(path, x) with uniform start over active features.
pub fn path_log_joint(x: &DMatrix<f64>, path: &[usize], f_row: &[bool], eta: &DMatrix<f64>, em: &[GaussianParams]) -> f64 {
    let act = active(f_row);
    let mut lp = -(act.len() as f64).ln();
    for (t, &s) in path.iter().enumerate() {
        if t > 0 {
            let prev = path[t - 1];
            let total: f64 = act.iter().map(|k| eta[(prev, *k)]).sum();
            lp += (eta[(prev, s)] / total).ln();
        }
        lp += gaussian_logpdf(&x.row(t).transpose(), &em[s]).unwrap();
    }
    lp
}

pub fn all_paths(act: &[usize], t: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for _ in 0..t {
        out = out
            .into_iter()
            .flat_map(|p| act.iter().map(move |k| {
                let mut q = p.clone();
                q.push(*k);
                q
            }))
            .collect();
    }
    out
}

pub fn brute_log_marginal(x: &DMatrix<f64>, f_row: &[bool], eta: &DMatrix<f64>, em: &[GaussianParams]) -> f64 {
    let terms: Vec<f64> = all_paths(&active(f_row), x.nrows()).iter().map(|p| path_log_joint(x, p, f_row, eta, em)).collect();
    let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + terms.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}
