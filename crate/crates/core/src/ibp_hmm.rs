//! Beta-process (IBP) HMM over a set of time series: a binary feature
//! matrix selects which shared Gaussian emission models each series may
//! visit, and per-series Gamma weights give the feature-constrained
//! transition rows.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::spcm_crp::{niw_posterior_stats, sample_niw, MarginalCache, NiwParams, SuffStats};
use crate::spd_core::{GaussianDensity, GaussianParams};
use crate::stats::{gamma_draw, harmonic, ln_gamma_pdf, logsumexp, sample_log_categorical};

/// M series of T⁽ⁱ⁾ × N observations (rows are time steps).
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesSet {
    pub series: Vec<DMatrix<f64>>,
    pub dim: usize,
}

impl TimeSeriesSet {
    pub fn new(series: Vec<DMatrix<f64>>) -> Result<Self> {
        let first = series.first().ok_or_else(|| Error::DegenerateData("no series".into()))?;
        let dim = first.ncols();
        if dim == 0 {
            return Err(Error::DegenerateData("zero-dimensional observations".into()));
        }
        for (i, s) in series.iter().enumerate() {
            if s.ncols() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: s.ncols() });
            }
            if s.nrows() < 2 {
                return Err(Error::DegenerateData(format!("series {i} has fewer than 2 steps")));
            }
            if s.iter().any(|v| !v.is_finite()) {
                return Err(Error::DegenerateData(format!("series {i} has non-finite values")));
            }
        }
        Ok(TimeSeriesSet { series, dim })
    }

    pub fn len(&self) -> usize {
        self.series.len()
    }

    pub fn is_empty(&self) -> bool {
        self.series.is_empty()
    }

    pub fn total_steps(&self) -> usize {
        self.series.iter().map(|s| s.nrows()).sum()
    }

    /// Pooled per-dimension mean and standard deviation.
    pub fn moments(&self) -> (DVector<f64>, DVector<f64>) {
        let n = self.total_steps() as f64;
        let mut mean = DVector::zeros(self.dim);
        for s in &self.series {
            for row in s.row_iter() {
                mean += row.transpose();
            }
        }
        mean /= n;
        let mut var = DVector::zeros(self.dim);
        for s in &self.series {
            for row in s.row_iter() {
                let d = row.transpose() - &mean;
                var += d.component_mul(&d);
            }
        }
        (mean, (var / n).map(f64::sqrt))
    }

    /// Per-dimension z-scoring with pooled moments.
    pub fn standardized(&self) -> TimeSeriesSet {
        let (mean, sd) = self.moments();
        let series = self
            .series
            .iter()
            .map(|s| {
                DMatrix::from_fn(s.nrows(), s.ncols(), |t, d| {
                    let scale = if sd[d] > 0.0 { sd[d] } else { 1.0 };
                    (s[(t, d)] - mean[d]) / scale
                })
            })
            .collect();
        TimeSeriesSet { series, dim: self.dim }
    }
}

/// M × K binary inclusion matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureMatrix {
    rows: Vec<Vec<bool>>,
    k: usize,
}

impl FeatureMatrix {
    pub fn new(rows: Vec<Vec<bool>>) -> Result<Self> {
        let k = rows.first().map(|r| r.len()).unwrap_or(0);
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::InvalidArgument("ragged feature matrix".into()));
        }
        Ok(FeatureMatrix { rows, k })
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn num_features(&self) -> usize {
        self.k
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.rows[i]
    }

    pub fn get(&self, i: usize, k: usize) -> bool {
        self.rows[i][k]
    }

    pub fn set_row(&mut self, i: usize, row: Vec<bool>) {
        assert_eq!(row.len(), self.k);
        self.rows[i] = row;
    }

    pub fn active(&self, i: usize) -> Vec<usize> {
        active_of(&self.rows[i])
    }

    /// m_k: rows using feature k.
    pub fn count(&self, k: usize) -> usize {
        self.rows.iter().filter(|r| r[k]).count()
    }

    /// m_{−i,k}.
    pub fn count_excluding(&self, k: usize, i: usize) -> usize {
        self.rows.iter().enumerate().filter(|(r, row)| *r != i && row[k]).count()
    }

    /// Columns active in exactly one row.
    pub fn num_unique(&self) -> usize {
        (0..self.k).filter(|&k| self.count(k) == 1).count()
    }

    pub fn push_column(&mut self, col: &[bool]) -> usize {
        for (row, v) in self.rows.iter_mut().zip(col) {
            row.push(*v);
        }
        self.k += 1;
        self.k - 1
    }

    pub fn remove_column(&mut self, k: usize) {
        for row in &mut self.rows {
            row.remove(k);
        }
        self.k -= 1;
    }

    pub fn permute_columns(&mut self, order: &[usize]) {
        for row in &mut self.rows {
            *row = order.iter().map(|&k| row[k]).collect();
        }
    }

    /// Every row has an active feature and every column an active row.
    pub fn is_valid(&self) -> bool {
        self.rows.iter().all(|r| r.iter().any(|v| *v)) && (0..self.k).all(|k| self.count(k) > 0)
    }
}

fn active_of(row: &[bool]) -> Vec<usize> {
    row.iter().enumerate().filter(|(_, v)| **v).map(|(k, _)| k).collect()
}

/// Per-series transition weights η⁽ⁱ⁾ with their concentration parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionWeights {
    pub eta: Vec<DMatrix<f64>>,
    pub alpha_b: f64,
    pub kappa: f64,
}

/// Row-stochastic π over the active features of `f_row`, with the active
/// feature indices in row/column order.
pub fn transition_distribution(eta: &DMatrix<f64>, f_row: &[bool]) -> (Vec<usize>, DMatrix<f64>) {
    let act = active_of(f_row);
    let a = act.len();
    let mut pi = DMatrix::zeros(a, a);
    for (r, &j) in act.iter().enumerate() {
        let total: f64 = act.iter().map(|&k| eta[(j, k)]).sum();
        for (c, &k) in act.iter().enumerate() {
            pi[(r, c)] = eta[(j, k)] / total;
        }
    }
    (act, pi)
}

/// T × K matrix of emission log-densities.
pub fn emission_loglik(x: &DMatrix<f64>, emissions: &[GaussianParams]) -> Result<DMatrix<f64>> {
    let dens = emissions.iter().map(GaussianDensity::new).collect::<Result<Vec<_>>>()?;
    Ok(loglik_with(x, &dens))
}

fn loglik_with(x: &DMatrix<f64>, dens: &[GaussianDensity]) -> DMatrix<f64> {
    let t_len = x.nrows();
    let mut out = DMatrix::zeros(t_len, dens.len());
    let mut buf = vec![0.0; x.ncols()];
    for t in 0..t_len {
        for (b, v) in buf.iter_mut().zip(x.row(t).iter()) {
            *b = *v;
        }
        for (k, d) in dens.iter().enumerate() {
            out[(t, k)] = d.logpdf(&buf);
        }
    }
    out
}

/// Scaled forward pass: returns log p(x) and the normalized filtered
/// probabilities are not kept. `ll` is T × K over all features.
pub(crate) fn forward_ll(ll: &DMatrix<f64>, f_row: &[bool], eta: &DMatrix<f64>) -> f64 {
    let (act, pi) = transition_distribution(eta, f_row);
    let a = act.len();
    let t_len = ll.nrows();
    let mut alpha = vec![1.0 / a as f64; a];
    let mut next = vec![0.0; a];
    let mut total = 0.0;
    for t in 0..t_len {
        let mx = act.iter().map(|&k| ll[(t, k)]).fold(f64::NEG_INFINITY, f64::max);
        if t > 0 {
            for c in 0..a {
                next[c] = (0..a).map(|r| alpha[r] * pi[(r, c)]).sum();
            }
            alpha.copy_from_slice(&next);
        }
        let mut norm = 0.0;
        for (c, &k) in act.iter().enumerate() {
            alpha[c] *= (ll[(t, k)] - mx).exp();
            norm += alpha[c];
        }
        if norm <= 0.0 {
            return f64::NEG_INFINITY;
        }
        for v in alpha.iter_mut() {
            *v /= norm;
        }
        total += mx + norm.ln();
    }
    total
}

/// log p(x | f, η, Θ) with the hidden states summed out; uniform initial
/// distribution over the active features.
pub fn forward_log_marginal(x: &DMatrix<f64>, f_row: &[bool], eta: &DMatrix<f64>, emissions: &[GaussianParams]) -> Result<f64> {
    check_row(f_row, eta, emissions)?;
    Ok(forward_ll(&emission_loglik(x, emissions)?, f_row, eta))
}

fn check_row(f_row: &[bool], eta: &DMatrix<f64>, emissions: &[GaussianParams]) -> Result<()> {
    if !f_row.iter().any(|v| *v) {
        return Err(Error::InvalidArgument("feature row has no active feature".into()));
    }
    if f_row.len() != emissions.len() || eta.nrows() < f_row.len() || eta.ncols() < f_row.len() {
        return Err(Error::DimensionMismatch { expected: f_row.len(), got: emissions.len() });
    }
    Ok(())
}

/// Exact joint draw of the state path: scaled backward messages, then
/// forward sampling.
pub(crate) fn sample_states_ll<R: Rng + ?Sized>(ll: &DMatrix<f64>, f_row: &[bool], eta: &DMatrix<f64>, rng: &mut R) -> Vec<usize> {
    let (act, pi) = transition_distribution(eta, f_row);
    let a = act.len();
    let t_len = ll.nrows();
    if a == 1 {
        return vec![act[0]; t_len];
    }
    // e[t][c] = exp(ll - max_t)
    let e: Vec<Vec<f64>> = (0..t_len)
        .map(|t| {
            let mx = act.iter().map(|&k| ll[(t, k)]).fold(f64::NEG_INFINITY, f64::max);
            act.iter().map(|&k| (ll[(t, k)] - mx).exp()).collect()
        })
        .collect();
    let mut beta = vec![vec![1.0; a]; t_len];
    for t in (0..t_len - 1).rev() {
        let mut norm = 0.0;
        for r in 0..a {
            let v: f64 = (0..a).map(|c| pi[(r, c)] * e[t + 1][c] * beta[t + 1][c]).sum();
            beta[t][r] = v;
            norm += v;
        }
        for v in beta[t].iter_mut() {
            *v /= norm;
        }
    }
    let mut out = Vec::with_capacity(t_len);
    let mut w: Vec<f64> = (0..a).map(|c| e[0][c] * beta[0][c]).collect();
    let mut prev = draw(&w, rng);
    out.push(act[prev]);
    for t in 1..t_len {
        for c in 0..a {
            w[c] = pi[(prev, c)] * e[t][c] * beta[t][c];
        }
        prev = draw(&w, rng);
        out.push(act[prev]);
    }
    out
}

fn draw<R: Rng + ?Sized>(w: &[f64], rng: &mut R) -> usize {
    let total: f64 = w.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, v) in w.iter().enumerate() {
        if u < *v {
            return i;
        }
        u -= v;
    }
    w.iter().rposition(|v| *v > 0.0).unwrap_or(0)
}

pub fn sample_states<R: Rng + ?Sized>(
    x: &DMatrix<f64>,
    f_row: &[bool],
    eta: &DMatrix<f64>,
    emissions: &[GaussianParams],
    rng: &mut R,
) -> Result<Vec<usize>> {
    check_row(f_row, eta, emissions)?;
    Ok(sample_states_ll(&emission_loglik(x, emissions)?, f_row, eta, rng))
}

/// n_jk: observed j → k transitions in `seq` over `k` features.
pub fn transition_counts(seq: &[usize], k: usize) -> DMatrix<f64> {
    let mut n = DMatrix::zeros(k, k);
    for w in seq.windows(2) {
        n[(w[0], w[1])] += 1.0;
    }
    n
}

/// η_jk ~ Gamma(α_b + κδ_jk + n_jk, 1) for active (j, k); inactive entries
/// are prior draws so that later feature flips have weights to use.
pub fn sample_eta<R: Rng + ?Sized>(
    states: &[Vec<usize>],
    f: &FeatureMatrix,
    alpha_b: f64,
    kappa: f64,
    rng: &mut R,
) -> Vec<DMatrix<f64>> {
    let k = f.num_features();
    states
        .iter()
        .enumerate()
        .map(|(i, seq)| {
            let n = transition_counts(seq, k);
            let row = f.row(i);
            DMatrix::from_fn(k, k, |j, c| {
                let sticky = if j == c { kappa } else { 0.0 };
                let count = if row[j] && row[c] { n[(j, c)] } else { 0.0 };
                gamma_draw(alpha_b + sticky + count, rng)
            })
        })
        .collect()
}

fn grow_eta<R: Rng + ?Sized>(eta: &DMatrix<f64>, alpha_b: f64, kappa: f64, rng: &mut R) -> DMatrix<f64> {
    let k = eta.nrows();
    let mut out = eta.clone().resize(k + 1, k + 1, 0.0);
    for j in 0..=k {
        out[(j, k)] = gamma_draw(alpha_b + if j == k { kappa } else { 0.0 }, rng);
        if j < k {
            out[(k, j)] = gamma_draw(alpha_b, rng);
        }
    }
    out
}

fn remove_index(m: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    m.clone().remove_row(k).remove_column(k)
}

/// Per-feature NIW posterior draws; unused features draw from the prior.
pub fn sample_emissions<R: Rng + ?Sized>(
    x: &TimeSeriesSet,
    states: &[Vec<usize>],
    k: usize,
    prior: &NiwParams,
    rng: &mut R,
) -> Result<Vec<GaussianParams>> {
    let stats = feature_stats(x, states, k, prior);
    stats.iter().map(|s| sample_niw(&niw_posterior_stats(prior, s), rng)).collect()
}

fn feature_stats(x: &TimeSeriesSet, states: &[Vec<usize>], k: usize, prior: &NiwParams) -> Vec<SuffStats> {
    let mut stats = vec![prior.empty_stats(); k];
    let mut buf = vec![0.0; x.dim];
    for (s, seq) in x.series.iter().zip(states) {
        for (t, &z) in seq.iter().enumerate() {
            for (b, v) in buf.iter_mut().zip(s.row(t).iter()) {
                *b = *v;
            }
            stats[z].add(&buf);
        }
    }
    stats
}

/// K₊·ln γ − γ·H_M with K₊ the number of features owned by a single series.
pub fn ibp_log_prior(f: &FeatureMatrix, gamma: f64) -> f64 {
    f.num_unique() as f64 * gamma.ln() - gamma * harmonic(f.num_rows())
}

/// Full IBP log-probability of a column-labeled feature matrix.
pub fn ibp_log_pmf(f: &FeatureMatrix, gamma: f64) -> f64 {
    let m = f.num_rows() as f64;
    let k = f.num_features();
    let mut out = k as f64 * gamma.ln() - gamma * harmonic(f.num_rows());
    for c in 0..k {
        let mk = f.count(c) as f64;
        out += ln_gamma(m - mk + 1.0) + ln_gamma(mk) - ln_gamma(m + 1.0);
    }
    out
}

/// log p(s | f, α_b, κ) with η integrated out (Dirichlet-multinomial per row)
/// and a uniform initial state.
pub fn transition_log_likelihood(seq: &[usize], f_row: &[bool], alpha_b: f64, kappa: f64) -> f64 {
    let act = active_of(f_row);
    let a = act.len() as f64;
    let n = transition_counts(seq, f_row.len());
    let mut out = -a.ln();
    for &j in &act {
        let row_total: f64 = act.iter().map(|&k| n[(j, k)]).sum();
        if row_total == 0.0 {
            continue;
        }
        let sum_a = a * alpha_b + kappa;
        out += ln_gamma(sum_a) - ln_gamma(sum_a + row_total);
        for &k in &act {
            let c = n[(j, k)];
            if c > 0.0 {
                let ak = alpha_b + if j == k { kappa } else { 0.0 };
                out += ln_gamma(ak + c) - ln_gamma(ak);
            }
        }
    }
    out
}

/// Gamma(shape, rate) hyper-priors on γ, α_b and κ.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HyperPriors {
    pub a_gamma: f64,
    pub b_gamma: f64,
    pub a_alpha: f64,
    pub b_alpha: f64,
    pub a_kappa: f64,
    pub b_kappa: f64,
}

impl Default for HyperPriors {
    fn default() -> Self {
        HyperPriors { a_gamma: 1.0, b_gamma: 1.0, a_alpha: 1.0, b_alpha: 1.0, a_kappa: 1.0, b_kappa: 1.0 }
    }
}

/// Full latent state of the IBP-HMM sampler.
#[derive(Debug, Clone, PartialEq)]
pub struct HmmState {
    pub features: FeatureMatrix,
    pub weights: TransitionWeights,
    pub states: Vec<Vec<usize>>,
    pub emissions: Vec<GaussianParams>,
    pub gamma: f64,
}

impl HmmState {
    pub fn num_features(&self) -> usize {
        self.features.num_features()
    }

    /// States of all series concatenated.
    pub fn flat_states(&self) -> Vec<usize> {
        self.states.iter().flatten().cloned().collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IbpHmmConfig {
    pub iterations: usize,
    pub seed: u64,
    /// Split-merge proposals per sweep.
    pub split_merge_moves: usize,
    /// Defaults to [`default_emission_prior`].
    pub emission_prior: Option<NiwParams>,
    pub hyper: HyperPriors,
    pub record_chain: bool,
}

impl Default for IbpHmmConfig {
    fn default() -> Self {
        IbpHmmConfig {
            iterations: 500,
            seed: 0,
            split_merge_moves: 10,
            emission_prior: None,
            hyper: HyperPriors::default(),
            record_chain: false,
        }
    }
}

/// Data-driven λ_θ: μ₀ = pooled mean, κ₀ = 0.1, ν₀ = N + 2, and Λ₀ chosen so
/// the prior mean covariance is a tenth of the pooled per-dimension variance.
pub fn default_emission_prior(x: &TimeSeriesSet) -> Result<NiwParams> {
    let (mean, sd) = x.moments();
    let n = x.dim as f64;
    let dof = n + 2.0;
    let diag = sd.map(|s| 0.1 * (s * s).max(1e-12) * (dof - n - 1.0));
    NiwParams::new(mean, 0.1, DMatrix::from_diagonal(&diag), dof)
}

/// Outcome counters for diagnostics.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct MoveStats {
    pub split_proposed: usize,
    pub split_accepted: usize,
    pub merge_proposed: usize,
    pub merge_accepted: usize,
    pub birth_accepted: usize,
    pub death_accepted: usize,
}

/// IBP-HMM Gibbs/MH sampler over a fixed dataset.
#[derive(Debug, Clone)]
pub struct IbpHmm {
    data: TimeSeriesSet,
    cache: MarginalCache,
    pub state: HmmState,
    pub hyper: HyperPriors,
    pub split_merge_moves: usize,
    pub moves: MoveStats,
}

impl IbpHmm {
    /// Each series starts with its own feature, fitted to its data.
    pub fn new<R: Rng + ?Sized>(data: TimeSeriesSet, prior: NiwParams, hyper: HyperPriors, rng: &mut R) -> Result<Self> {
        if prior.dim() != data.dim {
            return Err(Error::DimensionMismatch { expected: data.dim, got: prior.dim() });
        }
        let m = data.len();
        let rows = (0..m).map(|i| (0..m).map(|k| k == i).collect()).collect();
        let features = FeatureMatrix::new(rows)?;
        let states: Vec<Vec<usize>> = data.series.iter().enumerate().map(|(i, s)| vec![i; s.nrows()]).collect();
        let (alpha_b, kappa, gamma) = (1.0, 1.0, 1.0);
        let eta = sample_eta(&states, &features, alpha_b, kappa, rng);
        let emissions = sample_emissions(&data, &states, m, &prior, rng)?;
        Ok(IbpHmm {
            cache: MarginalCache::new(prior)?,
            data,
            state: HmmState {
                features,
                weights: TransitionWeights { eta, alpha_b, kappa },
                states,
                emissions,
                gamma,
            },
            hyper,
            split_merge_moves: 10,
            moves: MoveStats::default(),
        })
    }

    pub fn data(&self) -> &TimeSeriesSet {
        &self.data
    }

    pub fn emission_prior(&self) -> &NiwParams {
        self.cache.prior()
    }

    fn densities(&self) -> Result<Vec<GaussianDensity>> {
        self.state.emissions.iter().map(GaussianDensity::new).collect()
    }

    /// MH flips of shared features followed by one birth/death move of a
    /// series-specific feature, all with the states summed out.
    pub fn update_features<R: Rng + ?Sized>(&mut self, i: usize, rng: &mut R) -> Result<()> {
        let m = self.data.len();
        let dens = self.densities()?;
        let mut ll = loglik_with(&self.data.series[i], &dens);
        let mut row = self.state.features.row(i).to_vec();
        let eta_i = self.state.weights.eta[i].clone();
        let mut cur = forward_ll(&ll, &row, &eta_i);
        let k_total = row.len();
        for k in 0..k_total {
            let others = self.state.features.count_excluding(k, i);
            if others == 0 {
                continue;
            }
            if row[k] && row.iter().filter(|v| **v).count() == 1 {
                continue;
            }
            let mut prop = row.clone();
            prop[k] = !row[k];
            let lp = forward_ll(&ll, &prop, &eta_i);
            let p_on = others as f64 / m as f64;
            let log_prior = if prop[k] { (p_on / (1.0 - p_on)).ln() } else { ((1.0 - p_on) / p_on).ln() };
            if accept(lp - cur + log_prior, rng) {
                row = prop;
                cur = lp;
            }
        }
        self.state.features.set_row(i, row.clone());

        let unique: Vec<usize> =
            (0..k_total).filter(|&k| row[k] && self.state.features.count_excluding(k, i) == 0).collect();
        let ku = unique.len();
        let n_active = row.iter().filter(|v| **v).count();
        let lam = self.state.gamma / m as f64;
        let p_birth = |ku: usize, n_act: usize| if ku > 0 && n_act > 1 { 0.5 } else { 1.0 };
        let (alpha_b, kappa) = (self.state.weights.alpha_b, self.state.weights.kappa);
        if rng.random::<f64>() < p_birth(ku, n_active) {
            let theta = sample_niw(self.cache.prior(), rng)?;
            let dens_new = GaussianDensity::new(&theta)?;
            let x = &self.data.series[i];
            let t_len = x.nrows();
            ll = ll.resize_horizontally(k_total + 1, 0.0);
            let mut buf = vec![0.0; x.ncols()];
            for t in 0..t_len {
                for (b, v) in buf.iter_mut().zip(x.row(t).iter()) {
                    *b = *v;
                }
                ll[(t, k_total)] = dens_new.logpdf(&buf);
            }
            let eta_new = grow_eta(&eta_i, alpha_b, kappa, rng);
            let mut prop = row.clone();
            prop.push(true);
            let lp = forward_ll(&ll, &prop, &eta_new);
            let log_a = lp - cur + (lam / (ku as f64 + 1.0)).ln() + (1.0 - p_birth(ku + 1, n_active + 1)).ln()
                - p_birth(ku, n_active).ln();
            if accept(log_a, rng) {
                let mut col = vec![false; m];
                col[i] = true;
                self.state.features.push_column(&col);
                self.state.emissions.push(theta);
                for (r, eta) in self.state.weights.eta.iter_mut().enumerate() {
                    *eta = if r == i { eta_new.clone() } else { grow_eta(eta, alpha_b, kappa, rng) };
                }
                self.moves.birth_accepted += 1;
            }
        } else {
            let u = unique[rng.random_range(0..ku)];
            let mut prop = row.clone();
            prop[u] = false;
            let lp = forward_ll(&ll, &prop, &eta_i);
            let log_a = lp - cur + (ku as f64 / lam).ln() + p_birth(ku - 1, n_active - 1).ln()
                - (1.0 - p_birth(ku, n_active)).ln();
            if accept(log_a, rng) {
                self.state.features.set_row(i, prop);
                self.moves.death_accepted += 1;
            }
        }
        Ok(())
    }

    pub fn sample_all_states<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        let dens = self.densities()?;
        for i in 0..self.data.len() {
            let ll = loglik_with(&self.data.series[i], &dens);
            self.state.states[i] = sample_states_ll(&ll, self.state.features.row(i), &self.state.weights.eta[i], rng);
        }
        Ok(())
    }

    /// Drops columns that no state sequence visits (including columns no
    /// series has switched on).
    pub fn prune(&mut self) {
        let mut used = vec![false; self.state.num_features()];
        for &z in self.state.states.iter().flatten() {
            used[z] = true;
        }
        for k in (0..used.len()).rev() {
            if !used[k] {
                self.remove_feature(k);
            }
        }
    }

    fn remove_feature(&mut self, k: usize) {
        self.state.features.remove_column(k);
        self.state.emissions.remove(k);
        for eta in self.state.weights.eta.iter_mut() {
            *eta = remove_index(eta, k);
        }
        for seq in self.state.states.iter_mut() {
            for z in seq.iter_mut() {
                debug_assert!(*z != k, "removed feature still in use");
                if *z > k {
                    *z -= 1;
                }
            }
        }
    }

    /// Reorders columns by first use (series, then time); unused columns last.
    pub fn canonicalize(&mut self) {
        let k = self.state.num_features();
        let mut order = Vec::with_capacity(k);
        let mut seen = vec![false; k];
        for seq in &self.state.states {
            for &z in seq {
                if !seen[z] {
                    seen[z] = true;
                    order.push(z);
                }
            }
        }
        order.extend((0..k).filter(|c| !seen[*c]));
        if order.iter().enumerate().all(|(a, b)| a == *b) {
            return;
        }
        let mut inverse = vec![0; k];
        for (new, &old) in order.iter().enumerate() {
            inverse[old] = new;
        }
        self.state.features.permute_columns(&order);
        self.state.emissions = order.iter().map(|&o| self.state.emissions[o].clone()).collect();
        for eta in self.state.weights.eta.iter_mut() {
            *eta = DMatrix::from_fn(k, k, |r, c| eta[(order[r], order[c])]);
        }
        for seq in self.state.states.iter_mut() {
            for z in seq.iter_mut() {
                *z = inverse[*z];
            }
        }
    }

    fn stats_for(&self, states: &[Vec<usize>], k: usize) -> Vec<SuffStats> {
        feature_stats(&self.data, states, k, self.cache.prior())
    }

    /// Collapsed log posterior: IBP prior of F, Dirichlet-multinomial
    /// transitions and NIW marginals of the data assigned to each feature.
    pub fn collapsed_log_posterior(&self) -> Result<f64> {
        let st = &self.state;
        let mut out = ibp_log_pmf(&st.features, st.gamma);
        for (i, seq) in st.states.iter().enumerate() {
            out += transition_log_likelihood(seq, st.features.row(i), st.weights.alpha_b, st.weights.kappa);
        }
        for s in self.stats_for(&st.states, st.num_features()) {
            out += self.cache.log_marginal(&s)?;
        }
        Ok(out)
    }

    /// log q(k_j | k_i, f_j) for every column (−∞ where inactive).
    fn kj_log_probs(&self, ki: usize, f_j: &[bool], stats: &[SuffStats], logm: &[f64]) -> Result<Vec<f64>> {
        let k = f_j.len();
        let mut w = vec![f64::NEG_INFINITY; k];
        let mut others = Vec::new();
        for c in 0..k {
            if f_j[c] && c != ki {
                let joint = self.cache.log_marginal(&stats[ki].merged(&stats[c]))?;
                w[c] = joint - logm[ki] - logm[c];
                others.push(w[c]);
            }
        }
        if f_j[ki] {
            w[ki] = if others.is_empty() { 0.0 } else { std::f64::consts::LN_2 + logsumexp(&others) };
        }
        let z = logsumexp(&w);
        Ok(w.iter().map(|v| v - z).collect())
    }

    fn logm_all(&self, stats: &[SuffStats]) -> Result<Vec<f64>> {
        stats.iter().map(|s| self.cache.log_marginal(s)).collect()
    }

    /// Probability of allocating `order` to {a, b} as in `to_b`, starting from
    /// the two anchor units. Returns the log probability and both sides'
    /// statistics; when `sample` is set the allocation is drawn into `to_b`.
    fn sequential_allocation<R: Rng + ?Sized>(
        &self,
        units: &[SuffStats],
        anchors: (usize, usize),
        order: &[usize],
        to_b: &mut [bool],
        sample: bool,
        rng: &mut R,
    ) -> Result<(f64, SuffStats, SuffStats)> {
        let mut sa = units[anchors.0].clone();
        let mut sb = units[anchors.1].clone();
        let mut la = self.cache.log_marginal(&sa)?;
        let mut lb = self.cache.log_marginal(&sb)?;
        let mut log_q = 0.0;
        for &u in order {
            let na = sa.merged(&units[u]);
            let nb = sb.merged(&units[u]);
            let (lna, lnb) = (self.cache.log_marginal(&na)?, self.cache.log_marginal(&nb)?);
            let (wa, wb) = (lna - la, lnb - lb);
            let z = logsumexp(&[wa, wb]);
            if sample {
                to_b[u] = rng.random::<f64>() < (wb - z).exp();
            }
            if to_b[u] {
                log_q += wb - z;
                sb = nb;
                lb = lnb;
            } else {
                log_q += wa - z;
                sa = na;
                la = lna;
            }
        }
        Ok((log_q, sa, sb))
    }

    /// One split-merge proposal. Returns whether it was accepted.
    pub fn split_merge<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<bool> {
        let m = self.data.len();
        let (i, j) = if m == 1 {
            (0, 0)
        } else {
            let i = rng.random_range(0..m);
            let mut j = rng.random_range(0..m - 1);
            if j >= i {
                j += 1;
            }
            (i, j)
        };
        let f = &self.state.features;
        let k_total = f.num_features();
        let fi = f.active(i);
        let ki = fi[rng.random_range(0..fi.len())];
        let stats = self.stats_for(&self.state.states, k_total);
        let logm = self.logm_all(&stats)?;
        let q_kj = self.kj_log_probs(ki, f.row(j), &stats, &logm)?;
        let kj = sample_log_categorical(&q_kj, rng);
        let log_q_pair = -(fi.len() as f64).ln() + q_kj[kj];
        if kj == ki {
            self.moves.split_proposed += 1;
            self.try_split(i, j, ki, log_q_pair, &logm, rng)
        } else {
            self.moves.merge_proposed += 1;
            self.try_merge(i, j, ki, kj, log_q_pair, &logm, rng)
        }
    }

    /// Maximal runs of consecutive steps assigned to `k`, as (series,
    /// steps, statistics), ordered by series then time.
    fn runs_of(&self, k: usize) -> Vec<(usize, Vec<usize>, SuffStats)> {
        let prior = self.cache.prior();
        let mut out: Vec<(usize, Vec<usize>, SuffStats)> = Vec::new();
        let mut buf = vec![0.0; self.data.dim];
        for (l, seq) in self.state.states.iter().enumerate() {
            for (t, &z) in seq.iter().enumerate() {
                if z != k {
                    continue;
                }
                let extend = t > 0 && seq[t - 1] == k;
                if !extend {
                    out.push((l, Vec::new(), prior.empty_stats()));
                }
                let run = out.last_mut().expect("run started");
                for (b, v) in buf.iter_mut().zip(self.data.series[l].row(t).iter()) {
                    *b = *v;
                }
                run.1.push(t);
                run.2.add(&buf);
            }
        }
        out
    }

    fn log_target_rows(&self, features: &FeatureMatrix, states: &[Vec<usize>], rows: &[usize]) -> f64 {
        let w = &self.state.weights;
        rows.iter()
            .map(|&l| transition_log_likelihood(&states[l], features.row(l), w.alpha_b, w.kappa))
            .sum()
    }

    #[allow(clippy::too_many_arguments)]
    fn try_split<R: Rng + ?Sized>(
        &mut self,
        i: usize,
        j: usize,
        k: usize,
        log_q_pair: f64,
        logm: &[f64],
        rng: &mut R,
    ) -> Result<bool> {
        let runs = self.runs_of(k);
        let units: Vec<SuffStats> = runs.iter().map(|r| r.2.clone()).collect();
        let cand_i: Vec<usize> = (0..runs.len()).filter(|&u| runs[u].0 == i).collect();
        if cand_i.is_empty() {
            return Ok(false);
        }
        let ua = cand_i[rng.random_range(0..cand_i.len())];
        let cand_j: Vec<usize> = (0..runs.len()).filter(|&u| runs[u].0 == j && u != ua).collect();
        if cand_j.is_empty() {
            return Ok(false);
        }
        let ub = cand_j[rng.random_range(0..cand_j.len())];
        let log_anchor_fwd = -(cand_i.len() as f64).ln() - (cand_j.len() as f64).ln();
        let mut order: Vec<usize> = (0..runs.len()).filter(|&u| u != ua && u != ub).collect();
        order.shuffle(rng);
        let mut to_b = vec![false; runs.len()];
        to_b[ub] = true;
        let (log_alloc, sa, sb) = self.sequential_allocation(&units, (ua, ub), &order, &mut to_b, true, rng)?;

        // proposed state: a keeps index k, b is appended
        let m = self.data.len();
        let kb = self.state.num_features();
        let mut states = self.state.states.clone();
        let mut uses_a = vec![false; m];
        let mut uses_b = vec![false; m];
        for (u, (l, steps, _)) in runs.iter().enumerate() {
            if to_b[u] {
                for &t in steps {
                    states[*l][t] = kb;
                }
                uses_b[*l] = true;
            } else {
                uses_a[*l] = true;
            }
        }
        let mut features = self.state.features.clone();
        let affected: Vec<usize> = (0..m).filter(|&l| features.get(l, k)).collect();
        let mut col_b = vec![false; m];
        for &l in &affected {
            let mut row = features.row(l).to_vec();
            row[k] = uses_a[l] || !uses_b[l];
            features.set_row(l, row);
            col_b[l] = uses_b[l];
        }
        features.push_column(&col_b);

        let la = self.cache.log_marginal(&sa)?;
        let lb = self.cache.log_marginal(&sb)?;
        let gamma = self.state.gamma;
        let log_target = ibp_log_pmf(&features, gamma) - ibp_log_pmf(&self.state.features, gamma)
            + self.log_target_rows(&features, &states, &affected)
            - self.log_target_rows(&self.state.features, &self.state.states, &affected)
            + la
            + lb
            - logm[k];

        // reverse: pick a from f'_i, then b from q(· | a, f'_j), then anchors
        let mut stats_new = self.stats_for(&states, kb + 1);
        stats_new[k] = sa.clone();
        stats_new[kb] = sb.clone();
        let mut logm_new = logm.to_vec();
        logm_new[k] = la;
        logm_new.push(lb);
        let fi_new = features.active(i);
        let q_rev = self.kj_log_probs(k, features.row(j), &stats_new, &logm_new)?;
        // distinct units stay separated by other states, so they remain runs
        let a_in_i = runs.iter().zip(&to_b).filter(|(r, b)| r.0 == i && !**b).count();
        let b_in_j = runs.iter().zip(&to_b).filter(|(r, b)| r.0 == j && **b).count();
        let log_rev = -(fi_new.len() as f64).ln() + q_rev[kb] - (a_in_i as f64).ln() - (b_in_j as f64).ln();
        let log_fwd = log_q_pair + log_anchor_fwd + log_alloc;

        if !accept(log_target + log_rev - log_fwd, rng) {
            return Ok(false);
        }
        let prior = self.cache.prior().clone();
        let (alpha_b, kappa) = (self.state.weights.alpha_b, self.state.weights.kappa);
        self.state.features = features;
        self.state.states = states;
        self.state.emissions[k] = sample_niw(&niw_posterior_stats(&prior, &sa), rng)?;
        self.state.emissions.push(sample_niw(&niw_posterior_stats(&prior, &sb), rng)?);
        for eta in self.state.weights.eta.iter_mut() {
            *eta = grow_eta(eta, alpha_b, kappa, rng);
        }
        self.moves.split_accepted += 1;
        Ok(true)
    }

    #[allow(clippy::too_many_arguments)]
    fn try_merge<R: Rng + ?Sized>(
        &mut self,
        i: usize,
        j: usize,
        ka: usize,
        kb: usize,
        log_q_pair: f64,
        logm: &[f64],
        rng: &mut R,
    ) -> Result<bool> {
        let m = self.data.len();
        let f = &self.state.features;
        let mut uses_a = vec![false; m];
        let mut uses_b = vec![false; m];
        for (l, seq) in self.state.states.iter().enumerate() {
            uses_a[l] = seq.contains(&ka);
            uses_b[l] = seq.contains(&kb);
        }
        // the reverse split must be able to recreate the current columns
        for l in 0..m {
            let (fa, fb) = (f.get(l, ka), f.get(l, kb));
            if !(fa || fb) {
                continue;
            }
            let fa_split = uses_a[l] || !uses_b[l];
            if fa != fa_split || fb != uses_b[l] {
                return Ok(false);
            }
        }
        // runs of a and b that touch would fuse into one merged run
        for seq in &self.state.states {
            if seq.windows(2).any(|w| (w[0] == ka && w[1] == kb) || (w[0] == kb && w[1] == ka)) {
                return Ok(false);
            }
        }
        let runs_a = self.runs_of(ka);
        let runs_b = self.runs_of(kb);
        let a_i: Vec<usize> = (0..runs_a.len()).filter(|&u| runs_a[u].0 == i).collect();
        let b_j: Vec<usize> = (0..runs_b.len()).filter(|&u| runs_b[u].0 == j).collect();
        if a_i.is_empty() || b_j.is_empty() {
            return Ok(false);
        }
        let ua = a_i[rng.random_range(0..a_i.len())];
        let ub = b_j[rng.random_range(0..b_j.len())];
        let log_anchor_fwd = -(a_i.len() as f64).ln() - (b_j.len() as f64).ln();

        // merged unit list: a's runs then b's
        let na = runs_a.len();
        let series: Vec<usize> = runs_a.iter().chain(&runs_b).map(|r| r.0).collect();
        let units: Vec<SuffStats> = runs_a.iter().chain(&runs_b).map(|r| r.2.clone()).collect();
        let mut to_b: Vec<bool> = (0..units.len()).map(|u| u >= na).collect();
        let (ua_m, ub_m) = (ua, na + ub);
        let mut order: Vec<usize> = (0..units.len()).filter(|&u| u != ua_m && u != ub_m).collect();
        order.shuffle(rng);
        let (log_alloc, _, _) = self.sequential_allocation(&units, (ua_m, ub_m), &order, &mut to_b, false, rng)?;
        let n_i = series.iter().filter(|&&l| l == i).count();
        let n_j = series.iter().filter(|&&l| l == j).count() - usize::from(i == j);
        let log_anchor_rev = -(n_i as f64).ln() - (n_j as f64).ln();

        // proposed state
        let mut features = f.clone();
        let affected: Vec<usize> = (0..m).filter(|&l| f.get(l, ka) || f.get(l, kb)).collect();
        for &l in &affected {
            let mut row = features.row(l).to_vec();
            row[ka] = true;
            features.set_row(l, row);
        }
        features.remove_column(kb);
        let mut states = self.state.states.clone();
        for seq in states.iter_mut() {
            for z in seq.iter_mut() {
                if *z == kb {
                    *z = ka;
                }
                if *z > kb {
                    *z -= 1;
                }
            }
        }
        let ka_new = if ka > kb { ka - 1 } else { ka };
        let stats_new = self.stats_for(&states, features.num_features());
        let logm_new = self.logm_all(&stats_new)?;
        let gamma = self.state.gamma;
        let log_target = ibp_log_pmf(&features, gamma) - ibp_log_pmf(&self.state.features, gamma)
            + self.log_target_rows(&features, &states, &affected)
            - self.log_target_rows(&self.state.features, &self.state.states, &affected)
            + logm_new[ka_new]
            - logm[ka]
            - logm[kb];
        let fi_new = features.active(i);
        let q_rev = self.kj_log_probs(ka_new, features.row(j), &stats_new, &logm_new)?;
        let log_rev = -(fi_new.len() as f64).ln() + q_rev[ka_new] + log_anchor_rev + log_alloc;
        let log_fwd = log_q_pair + log_anchor_fwd;
        if !accept(log_target + log_rev - log_fwd, rng) {
            return Ok(false);
        }
        let prior = self.cache.prior().clone();
        self.state.features = features;
        self.state.states = states;
        self.state.emissions.remove(kb);
        self.state.emissions[ka_new] = sample_niw(&niw_posterior_stats(&prior, &stats_new[ka_new]), rng)?;
        for eta in self.state.weights.eta.iter_mut() {
            *eta = remove_index(eta, kb);
        }
        self.moves.merge_accepted += 1;
        Ok(true)
    }

    pub fn resample_eta<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let w = &self.state.weights;
        self.state.weights.eta = sample_eta(&self.state.states, &self.state.features, w.alpha_b, w.kappa, rng);
    }

    pub fn resample_emissions<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        let k = self.state.num_features();
        self.state.emissions = sample_emissions(&self.data, &self.state.states, k, self.cache.prior(), rng)?;
        Ok(())
    }

    /// Feature, state, split-merge, η and Θ updates in that order.
    pub fn sweep_core<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        for i in 0..self.data.len() {
            self.update_features(i, rng)?;
        }
        self.sample_all_states(rng)?;
        self.prune();
        for _ in 0..self.split_merge_moves {
            self.split_merge(rng)?;
        }
        self.prune();
        self.resample_eta(rng);
        self.resample_emissions(rng)?;
        self.canonicalize();
        Ok(())
    }

    /// Concentration updates under the current hyper-priors.
    pub fn sample_hyper<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let h = self.hyper;
        self.state.gamma = crate::icsc_hmm::sample_gamma(&self.state.features, h.a_gamma, h.b_gamma, rng);
        let (a, k) = crate::icsc_hmm::mh_concentration(
            (self.state.weights.alpha_b, self.state.weights.kappa),
            &h,
            &self.state.states,
            &self.state.features,
            rng,
        );
        self.state.weights.alpha_b = a;
        self.state.weights.kappa = k;
    }
}

pub(crate) fn accept<R: Rng + ?Sized>(log_ratio: f64, rng: &mut R) -> bool {
    if log_ratio.is_nan() {
        return false;
    }
    log_ratio >= 0.0 || rng.random::<f64>().ln() < log_ratio
}

/// log Gamma(x; a, b) kept here for the concentration updates.
pub(crate) fn ln_gamma_density(x: f64, shape: f64, rate: f64) -> f64 {
    ln_gamma_pdf(x, shape, rate)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationSummary {
    pub iteration: usize,
    pub log_posterior: f64,
    pub k: usize,
    pub k_z: usize,
    pub gamma: f64,
    pub alpha_b: f64,
    pub kappa: f64,
}

#[derive(Debug, Clone)]
pub struct IbpRun {
    pub trace: Vec<IterationSummary>,
    pub selected: HmmState,
    pub selected_iteration: usize,
    pub chain: Vec<HmmState>,
    pub moves: MoveStats,
}

/// Plain IBP-HMM with fixed Gamma hyper-priors; returns the iteration with
/// the highest collapsed log posterior.
pub fn run_ibp(x: &TimeSeriesSet, cfg: &IbpHmmConfig) -> Result<IbpRun> {
    let mut rng = crate::rng_from_seed(cfg.seed);
    let prior = match &cfg.emission_prior {
        Some(p) => p.clone(),
        None => default_emission_prior(x)?,
    };
    let mut hmm = IbpHmm::new(x.clone(), prior, cfg.hyper, &mut rng)?;
    hmm.split_merge_moves = cfg.split_merge_moves;
    let mut trace = Vec::with_capacity(cfg.iterations);
    let mut chain = Vec::new();
    let mut best: Option<(f64, usize, HmmState)> = None;
    for it in 1..=cfg.iterations {
        hmm.sweep_core(&mut rng)?;
        hmm.sample_hyper(&mut rng);
        let lp = hmm.collapsed_log_posterior()?;
        let st = &hmm.state;
        trace.push(IterationSummary {
            iteration: it,
            log_posterior: lp,
            k: st.num_features(),
            k_z: st.num_features(),
            gamma: st.gamma,
            alpha_b: st.weights.alpha_b,
            kappa: st.weights.kappa,
        });
        if best.as_ref().is_none_or(|(b, _, _)| lp > *b) {
            best = Some((lp, it, st.clone()));
        }
        if cfg.record_chain {
            chain.push(st.clone());
        }
    }
    let (_, selected_iteration, selected) =
        best.ok_or_else(|| Error::InvalidArgument("iterations must be at least 1".into()))?;
    Ok(IbpRun { trace, selected, selected_iteration, chain, moves: hmm.moves })
}
