//! SPCM-CRP mixture: similarity-dependent customer links over a spectral
//! embedding, Gaussian tables with a Normal-Inverse-Wishart prior, and a
//! collapsed Gibbs sampler over the links.

use std::collections::VecDeque;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::similarity::SimilarityMatrix;
use crate::spd_core::{validate_spd, GaussianParams};
use crate::spectral_embedding::Embedding;
use crate::stats::{gamma_draw, ln_mvgamma, sample_log_categorical, std_normal};
use crate::rng_from_seed;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Mean-precision weight of the data-driven prior. Small values let a
/// table sit anywhere on the embedding without paying a location penalty.
pub const DATA_DRIVEN_KAPPA: f64 = 0.001;

/// Normal-Inverse-Wishart hyper-parameters {μ₀, κ₀, Λ₀, ν₀}.
#[derive(Debug, Clone, PartialEq)]
pub struct NiwParams {
    pub mean: DVector<f64>,
    pub kappa: f64,
    pub scale: DMatrix<f64>,
    pub dof: f64,
}

impl NiwParams {
    pub fn new(mean: DVector<f64>, kappa: f64, scale: DMatrix<f64>, dof: f64) -> Result<Self> {
        let d = mean.len();
        if scale.nrows() != d {
            return Err(Error::DimensionMismatch { expected: d, got: scale.nrows() });
        }
        if !(kappa > 0.0) {
            return Err(Error::InvalidArgument("kappa must be positive".into()));
        }
        if !(dof > d as f64 - 1.0) {
            return Err(Error::InvalidArgument(format!("dof must exceed {}", d as f64 - 1.0)));
        }
        let scale = validate_spd(&scale)?.into_inner();
        Ok(NiwParams { mean, kappa, scale, dof })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// μ₀ = data mean, κ₀ = [`DATA_DRIVEN_KAPPA`], ν₀ = P + 3, Λ₀ = centered
    /// scatter / M (+1e-6·I so a single point still gives a proper prior).
    /// Rows of `y` are points.
    pub fn data_driven(y: &DMatrix<f64>) -> Result<Self> {
        let m = y.nrows();
        let p = y.ncols();
        if m == 0 || p == 0 {
            return Err(Error::DegenerateData("empty embedding".into()));
        }
        let mean = y.row_mean().transpose();
        let mut scatter = DMatrix::zeros(p, p);
        for row in y.row_iter() {
            let d = row.transpose() - &mean;
            scatter += &d * d.transpose();
        }
        let scale = scatter / m as f64 + DMatrix::identity(p, p) * 1e-6;
        NiwParams::new(mean, DATA_DRIVEN_KAPPA, scale, p as f64 + 3.0)
    }

    /// log Z(κ, ν, Λ) = (νd/2) ln 2 + ln Γ_d(ν/2) + (d/2) ln(2π/κ) − (ν/2) ln|Λ|.
    pub fn log_normalizer(&self) -> Result<f64> {
        let d = self.dim() as f64;
        let chol = Cholesky::new(self.scale.clone())
            .ok_or_else(|| Error::NumericalFailure("NIW scale is not positive definite".into()))?;
        let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Ok(self.dof * d / 2.0 * std::f64::consts::LN_2
            + ln_mvgamma(self.dim(), self.dof / 2.0)
            + d / 2.0 * (LN_2PI - self.kappa.ln())
            - self.dof / 2.0 * log_det)
    }

    pub fn empty_stats(&self) -> SuffStats {
        SuffStats::new(self.mean.clone())
    }
}

/// Sufficient statistics of points, centered on a fixed offset (the prior
/// mean) to limit cancellation.
#[derive(Debug, Clone, PartialEq)]
pub struct SuffStats {
    offset: DVector<f64>,
    pub n: usize,
    sum: DVector<f64>,
    outer: DMatrix<f64>,
}

impl SuffStats {
    pub fn new(offset: DVector<f64>) -> Self {
        let d = offset.len();
        SuffStats { offset, n: 0, sum: DVector::zeros(d), outer: DMatrix::zeros(d, d) }
    }

    pub fn add(&mut self, x: &[f64]) {
        self.update(x, 1.0);
        self.n += 1;
    }

    pub fn remove(&mut self, x: &[f64]) {
        debug_assert!(self.n > 0);
        self.update(x, -1.0);
        self.n -= 1;
    }

    fn update(&mut self, x: &[f64], w: f64) {
        let d = self.offset.len();
        for a in 0..d {
            let da = x[a] - self.offset[a];
            self.sum[a] += w * da;
            for b in 0..d {
                self.outer[(a, b)] += w * da * (x[b] - self.offset[b]);
            }
        }
    }

    pub fn merge(&mut self, other: &SuffStats) {
        self.n += other.n;
        self.sum += &other.sum;
        self.outer += &other.outer;
    }

    pub fn merged(&self, other: &SuffStats) -> SuffStats {
        let mut s = self.clone();
        s.merge(other);
        s
    }
}

/// Posterior NIW parameters from sufficient statistics.
pub fn niw_posterior_stats(prior: &NiwParams, stats: &SuffStats) -> NiwParams {
    if stats.n == 0 {
        return prior.clone();
    }
    let n = stats.n as f64;
    let kn = prior.kappa + n;
    // all vectors relative to the prior mean
    let dbar = &stats.sum / n;
    let scatter = &stats.outer - &dbar * dbar.transpose() * n;
    let scale = &prior.scale + scatter + &dbar * dbar.transpose() * (prior.kappa * n / kn);
    NiwParams {
        mean: &prior.mean + &dbar * (n / kn),
        kappa: kn,
        scale: (&scale + scale.transpose()) * 0.5,
        dof: prior.dof + n,
    }
}

fn stats_of(prior: &NiwParams, data: &DMatrix<f64>) -> Result<SuffStats> {
    if data.nrows() > 0 && data.ncols() != prior.dim() {
        return Err(Error::DimensionMismatch { expected: prior.dim(), got: data.ncols() });
    }
    let mut s = prior.empty_stats();
    let mut buf = vec![0.0; prior.dim()];
    for row in data.row_iter() {
        for (b, v) in buf.iter_mut().zip(row.iter()) {
            *b = *v;
        }
        s.add(&buf);
    }
    Ok(s)
}

/// Posterior update for `data` (rows are points).
pub fn niw_posterior(prior: &NiwParams, data: &DMatrix<f64>) -> Result<NiwParams> {
    Ok(niw_posterior_stats(prior, &stats_of(prior, data)?))
}

pub fn niw_log_marginal_stats(prior: &NiwParams, stats: &SuffStats) -> Result<f64> {
    if stats.n == 0 {
        return Ok(0.0);
    }
    let post = niw_posterior_stats(prior, stats);
    let d = prior.dim() as f64;
    Ok(post.log_normalizer()? - prior.log_normalizer()? - stats.n as f64 * d / 2.0 * LN_2PI)
}

/// Closed-form log ∫ Π N(yᵢ|θ) NIW(θ|λ) dθ.
pub fn niw_log_marginal(data: &DMatrix<f64>, prior: &NiwParams) -> Result<f64> {
    niw_log_marginal_stats(prior, &stats_of(prior, data)?)
}

/// Caches log Z₀ so repeated marginals only factor the posterior scale.
#[derive(Debug, Clone)]
pub(crate) struct MarginalCache {
    prior: NiwParams,
    log_z0: f64,
}

impl MarginalCache {
    pub(crate) fn new(prior: NiwParams) -> Result<Self> {
        let log_z0 = prior.log_normalizer()?;
        Ok(MarginalCache { prior, log_z0 })
    }

    pub(crate) fn prior(&self) -> &NiwParams {
        &self.prior
    }

    pub(crate) fn log_marginal(&self, stats: &SuffStats) -> Result<f64> {
        if stats.n == 0 {
            return Ok(0.0);
        }
        let post = niw_posterior_stats(&self.prior, stats);
        Ok(post.log_normalizer()? - self.log_z0 - stats.n as f64 * self.prior.dim() as f64 / 2.0 * LN_2PI)
    }
}

/// Draw (μ, Σ) from NIW: Σ ~ IW(Λ, ν) by Bartlett decomposition, μ ~ N(μ, Σ/κ).
pub fn sample_niw<R: Rng + ?Sized>(p: &NiwParams, rng: &mut R) -> Result<GaussianParams> {
    let d = p.dim();
    let fail = || Error::NumericalFailure("NIW scale is not positive definite".into());
    let lam_inv = Cholesky::new(p.scale.clone()).ok_or_else(fail)?.inverse();
    let l = Cholesky::new((&lam_inv + lam_inv.transpose()) * 0.5).ok_or_else(fail)?.l();
    let mut a = DMatrix::zeros(d, d);
    for i in 0..d {
        let k = p.dof - i as f64;
        a[(i, i)] = (2.0 * gamma_draw(k / 2.0, rng)).sqrt();
        for j in 0..i {
            a[(i, j)] = std_normal(rng);
        }
    }
    // W = (LA)(LA)ᵀ ~ Wishart(Λ⁻¹, ν); Σ = W⁻¹
    let b = l * a;
    let b_inv = b.solve_lower_triangular(&DMatrix::identity(d, d)).ok_or_else(fail)?;
    let sigma = b_inv.transpose() * &b_inv;
    let sigma = (&sigma + sigma.transpose()) * 0.5;
    let cov = validate_spd(&sigma).map_err(|_| Error::NumericalFailure("inverse-Wishart draw is singular".into()))?;
    let lc = Cholesky::new(cov.matrix() / p.kappa).ok_or_else(fail)?.l();
    let z = DVector::from_fn(d, |_, _| std_normal(rng));
    let mean = &p.mean + lc * z;
    GaussianParams::new(mean, cov)
}

/// Customer links: `links[i] = j` means customer i sits with j.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeatingAssignments {
    pub links: Vec<usize>,
}

impl SeatingAssignments {
    pub fn singletons(m: usize) -> Self {
        SeatingAssignments { links: (0..m).collect() }
    }
}

/// Contiguous table labels 0..K.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TableLabels {
    pub labels: Vec<usize>,
    pub count: usize,
}

impl TableLabels {
    pub fn from_labels(raw: &[usize]) -> Self {
        let mut map = std::collections::HashMap::new();
        let labels: Vec<usize> = raw
            .iter()
            .map(|l| {
                let next = map.len();
                *map.entry(*l).or_insert(next)
            })
            .collect();
        TableLabels { labels, count: map.len() }
    }

    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.count];
        for (i, l) in self.labels.iter().enumerate() {
            out[*l].push(i);
        }
        out
    }
}

/// Connected components of the link graph, labeled by first appearance.
pub fn table_map(c: &SeatingAssignments) -> TableLabels {
    let m = c.links.len();
    let mut parent: Vec<usize> = (0..m).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for (i, &j) in c.links.iter().enumerate() {
        let (a, b) = (find(&mut parent, i), find(&mut parent, j));
        if a != b {
            parent[a.max(b)] = a.min(b);
        }
    }
    let roots: Vec<usize> = (0..m).map(|i| find(&mut parent, i)).collect();
    TableLabels::from_labels(&roots)
}

/// Per-customer log link probabilities: row i holds ln p(cᵢ = j), with the
/// diagonal for the self-link. Each row is normalized over {s_ij (j≠i), α}.
fn log_link_table(s: &DMatrix<f64>, alpha: f64) -> Vec<Vec<f64>> {
    let m = s.nrows();
    (0..m)
        .map(|i| {
            let total: f64 = (0..m).filter(|j| *j != i).map(|j| s[(i, j)]).sum::<f64>() + alpha;
            let ln_total = total.ln();
            (0..m)
                .map(|j| if j == i { alpha.ln() - ln_total } else { s[(i, j)].ln() - ln_total })
                .collect()
        })
        .collect()
}

pub fn spcm_crp_log_prior(c: &SeatingAssignments, s: &SimilarityMatrix, alpha: f64) -> f64 {
    let table = log_link_table(&s.to_affinity(), alpha);
    c.links.iter().enumerate().map(|(i, &j)| table[i][j]).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrpSamplerConfig {
    pub alpha: f64,
    pub iterations: usize,
    pub seed: u64,
    /// Defaults to [`NiwParams::data_driven`] on the embedding.
    pub niw: Option<NiwParams>,
    /// Keep every sweep's labels in the returned chain.
    pub record_chain: bool,
}

impl Default for CrpSamplerConfig {
    fn default() -> Self {
        CrpSamplerConfig { alpha: 1.0, iterations: 500, seed: 0, niw: None, record_chain: false }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrpSample {
    pub iteration: usize,
    pub links: SeatingAssignments,
    pub labels: TableLabels,
    pub log_posterior: f64,
}

#[derive(Debug, Clone)]
pub struct CrpRun {
    /// Log posterior after each sweep; entry 0 is the initial state.
    pub trace: Vec<f64>,
    pub k_trace: Vec<usize>,
    pub chain: Vec<CrpSample>,
    pub map: CrpSample,
    pub prior: NiwParams,
}

#[derive(Debug, Clone)]
struct Table {
    members: Vec<usize>,
    stats: SuffStats,
    log_marginal: f64,
}

/// Collapsed Gibbs sampler state over customer links.
#[derive(Debug, Clone)]
pub struct CrpSampler {
    y: DMatrix<f64>,
    log_link: Vec<Vec<f64>>,
    cache: MarginalCache,
    links: Vec<usize>,
    children: Vec<Vec<usize>>,
    table_of: Vec<usize>,
    tables: Vec<Option<Table>>,
    free: Vec<usize>,
}

impl CrpSampler {
    /// All customers start at their own table.
    pub fn new(y: &DMatrix<f64>, affinity: &DMatrix<f64>, alpha: f64, prior: NiwParams) -> Result<Self> {
        Self::with_links(y, affinity, alpha, prior, &SeatingAssignments::singletons(y.nrows()))
    }

    pub fn with_links(
        y: &DMatrix<f64>,
        affinity: &DMatrix<f64>,
        alpha: f64,
        prior: NiwParams,
        links: &SeatingAssignments,
    ) -> Result<Self> {
        let m = y.nrows();
        if affinity.nrows() != m || affinity.ncols() != m {
            return Err(Error::DimensionMismatch { expected: m, got: affinity.nrows() });
        }
        if links.links.len() != m || links.links.iter().any(|j| *j >= m) {
            return Err(Error::InvalidArgument("links do not match the data size".into()));
        }
        if y.ncols() != prior.dim() {
            return Err(Error::DimensionMismatch { expected: prior.dim(), got: y.ncols() });
        }
        if !(alpha > 0.0) {
            return Err(Error::InvalidArgument("alpha must be positive".into()));
        }
        if affinity.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidSimilarity("similarities must be finite and non-negative".into()));
        }
        let mut sampler = CrpSampler {
            y: y.clone(),
            log_link: log_link_table(affinity, alpha),
            cache: MarginalCache::new(prior)?,
            links: links.links.clone(),
            children: vec![Vec::new(); m],
            table_of: vec![0; m],
            tables: Vec::new(),
            free: Vec::new(),
        };
        for (i, &j) in links.links.iter().enumerate() {
            if i != j {
                sampler.children[j].push(i);
            }
        }
        let labels = table_map(links);
        for members in labels.members() {
            sampler.insert_table(members)?;
        }
        Ok(sampler)
    }

    fn point(&self, i: usize) -> Vec<f64> {
        self.y.row(i).iter().cloned().collect()
    }

    fn insert_table(&mut self, members: Vec<usize>) -> Result<usize> {
        let mut stats = self.cache.prior().empty_stats();
        for &i in &members {
            stats.add(&self.point(i));
        }
        let log_marginal = self.cache.log_marginal(&stats)?;
        let slot = match self.free.pop() {
            Some(s) => s,
            None => {
                self.tables.push(None);
                self.tables.len() - 1
            }
        };
        for &i in &members {
            self.table_of[i] = slot;
        }
        self.tables[slot] = Some(Table { members, stats, log_marginal });
        Ok(slot)
    }

    fn take_table(&mut self, slot: usize) -> Table {
        self.free.push(slot);
        self.tables[slot].take().expect("live table")
    }

    fn table(&self, slot: usize) -> &Table {
        self.tables[slot].as_ref().expect("live table")
    }

    pub fn size(&self) -> usize {
        self.links.len()
    }

    pub fn links(&self) -> SeatingAssignments {
        SeatingAssignments { links: self.links.clone() }
    }

    pub fn labels(&self) -> TableLabels {
        table_map(&self.links())
    }

    pub fn num_tables(&self) -> usize {
        self.tables.iter().filter(|t| t.is_some()).count()
    }

    pub fn log_prior(&self) -> f64 {
        self.links.iter().enumerate().map(|(i, &j)| self.log_link[i][j]).sum()
    }

    /// Sum of the cached per-table log marginals.
    pub fn log_likelihood(&self) -> f64 {
        self.tables.iter().flatten().map(|t| t.log_marginal).sum()
    }

    /// Same quantity computed from scratch.
    pub fn recompute_log_likelihood(&self) -> Result<f64> {
        let mut total = 0.0;
        for members in self.labels().members() {
            let mut stats = self.cache.prior().empty_stats();
            for i in members {
                stats.add(&self.point(i));
            }
            total += self.cache.log_marginal(&stats)?;
        }
        Ok(total)
    }

    pub fn log_posterior(&self) -> f64 {
        self.log_prior() + self.log_likelihood()
    }

    /// Customers reachable from `start` in the undirected link graph.
    fn component(&self, start: usize) -> Vec<usize> {
        let mut seen = vec![start];
        let mut queue = VecDeque::from([start]);
        let mut mark = std::collections::HashSet::from([start]);
        while let Some(k) = queue.pop_front() {
            let up = self.links[k];
            for &nb in std::iter::once(&up).chain(self.children[k].iter()) {
                if mark.insert(nb) {
                    seen.push(nb);
                    queue.push_back(nb);
                }
            }
        }
        seen
    }

    /// Resample the link of customer `i`.
    pub fn update_customer<R: Rng + ?Sized>(&mut self, i: usize, rng: &mut R) -> Result<()> {
        let old = self.links[i];
        if old != i {
            self.children[old].retain(|&c| c != i);
            self.links[i] = i;
            let reach = self.component(i);
            if !reach.contains(&old) {
                let slot = self.table_of[i];
                let t = self.take_table(slot);
                let mark: std::collections::HashSet<usize> = reach.iter().cloned().collect();
                let rest: Vec<usize> = t.members.into_iter().filter(|k| !mark.contains(k)).collect();
                self.insert_table(rest)?;
                self.insert_table(reach)?;
            }
        }
        let ti = self.table_of[i];
        let m = self.size();
        let mut merge: Vec<Option<f64>> = vec![None; self.tables.len()];
        let mut log_w = vec![f64::NEG_INFINITY; m];
        for j in 0..m {
            let base = self.log_link[i][j];
            if base == f64::NEG_INFINITY {
                continue;
            }
            let tj = self.table_of[j];
            if j == i || tj == ti {
                log_w[j] = base;
                continue;
            }
            let ratio = match merge[tj] {
                Some(r) => r,
                None => {
                    let (a, b) = (self.table(ti), self.table(tj));
                    let joint = self.cache.log_marginal(&a.stats.merged(&b.stats))?;
                    let r = joint - a.log_marginal - b.log_marginal;
                    merge[tj] = Some(r);
                    r
                }
            };
            log_w[j] = base + ratio;
        }
        let j = sample_log_categorical(&log_w, rng);
        self.links[i] = j;
        if j != i {
            self.children[j].push(i);
        }
        let tj = self.table_of[j];
        if tj != ti {
            let a = self.take_table(ti);
            let b = self.take_table(tj);
            let mut members = a.members;
            members.extend(b.members);
            let mut stats = a.stats;
            stats.merge(&b.stats);
            let log_marginal = self.cache.log_marginal(&stats)?;
            let slot = self.free.pop().expect("freed slot");
            for &k in &members {
                self.table_of[k] = slot;
            }
            self.tables[slot] = Some(Table { members, stats, log_marginal });
        }
        Ok(())
    }

    /// One pass over all customers in a fresh random order.
    pub fn sweep<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        let mut order: Vec<usize> = (0..self.size()).collect();
        order.shuffle(rng);
        for i in order {
            self.update_customer(i, rng)?;
        }
        Ok(())
    }

    fn snapshot(&self, iteration: usize) -> CrpSample {
        CrpSample { iteration, links: self.links(), labels: self.labels(), log_posterior: self.log_posterior() }
    }

    /// Run `iterations` sweeps, returning the trace and the highest-posterior
    /// visited state (earliest on ties, initial state included).
    pub fn run<R: Rng + ?Sized>(&mut self, iterations: usize, record_chain: bool, rng: &mut R) -> Result<CrpRun> {
        let mut map = self.snapshot(0);
        let mut trace = vec![map.log_posterior];
        let mut k_trace = vec![map.labels.count];
        let mut chain = Vec::new();
        if record_chain {
            chain.push(map.clone());
        }
        for it in 1..=iterations {
            self.sweep(rng)?;
            let lp = self.log_posterior();
            trace.push(lp);
            k_trace.push(self.num_tables());
            if lp > map.log_posterior {
                map = self.snapshot(it);
            }
            if record_chain {
                chain.push(self.snapshot(it));
            }
        }
        Ok(CrpRun { trace, k_trace, chain, map, prior: self.cache.prior().clone() })
    }
}

/// Collapsed Gibbs sampling of the SPCM-CRP posterior from all-singleton links.
pub fn run_sampler(y: &Embedding, s: &SimilarityMatrix, cfg: &CrpSamplerConfig) -> Result<CrpRun> {
    if s.size() != y.source_size() {
        return Err(Error::DimensionMismatch { expected: y.source_size(), got: s.size() });
    }
    if cfg.iterations == 0 {
        return Err(Error::InvalidArgument("iterations must be at least 1".into()));
    }
    let prior = match &cfg.niw {
        Some(p) => p.clone(),
        None => NiwParams::data_driven(&y.coords)?,
    };
    let mut rng = rng_from_seed(cfg.seed);
    let mut sampler = CrpSampler::new(&y.coords, &s.to_affinity(), cfg.alpha, prior)?;
    sampler.run(cfg.iterations, cfg.record_chain, &mut rng)
}

/// One NIW posterior draw per table.
pub fn sample_cluster_params<R: Rng + ?Sized>(
    z: &TableLabels,
    y: &DMatrix<f64>,
    prior: &NiwParams,
    rng: &mut R,
) -> Result<Vec<GaussianParams>> {
    if z.labels.len() != y.nrows() {
        return Err(Error::LengthMismatch(z.labels.len(), y.nrows()));
    }
    let mut stats = vec![prior.empty_stats(); z.count];
    for (i, &l) in z.labels.iter().enumerate() {
        let row: Vec<f64> = y.row(i).iter().cloned().collect();
        stats[l].add(&row);
    }
    stats.iter().map(|s| sample_niw(&niw_posterior_stats(prior, s), rng)).collect()
}
