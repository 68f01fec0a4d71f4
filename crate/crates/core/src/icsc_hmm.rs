//! Coupled IBP-HMM / SPCM-CRP sampler: after each IBP-HMM sweep the current
//! emission covariances are clustered with a short SPCM-CRP chain, and the
//! resulting number of transform-invariant groups K_Z shapes the Gamma
//! hyper-priors of γ, α_b and κ.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::ibp_hmm::{
    accept, default_emission_prior, ln_gamma_density, transition_log_likelihood, FeatureMatrix, HmmState,
    HyperPriors, IbpHmm, IbpHmmConfig, IterationSummary, MoveStats, TimeSeriesSet, TransitionWeights,
};
use crate::similarity::{pairwise_matrix, SimilarityKind};
use crate::spcm_crp::{CrpSampler, NiwParams, SeatingAssignments, TableLabels};
use crate::spd_core::{GaussianParams, SpdMatrix};
use crate::stats::{gamma_draw, harmonic};

const MH_STEP: f64 = 0.2;
const WARM_ITERATIONS: usize = 5;
const FRESH_ITERATIONS: usize = 10;
/// Expected per-axis spread of a feature cluster on the embedding sphere.
const NESTED_CLUSTER_VAR: f64 = 0.01;
const NESTED_KAPPA: f64 = 0.1;

pub fn couple_hyperpriors(k: usize, k_z: usize, m: usize) -> HyperPriors {
    assert!(k_z >= 1 && k_z <= k && m >= 1, "need 1 ≤ K_Z ≤ K and M ≥ 1");
    let ratio = k as f64 / k_z as f64;
    let shared = ratio / m as f64;
    HyperPriors { a_gamma: shared, b_gamma: shared, a_alpha: shared, b_alpha: shared, a_kappa: ratio, b_kappa: ratio }
}

/// γ | F ~ Gamma(a + K₊, b + H_M).
pub fn sample_gamma<R: Rng + ?Sized>(f: &FeatureMatrix, a: f64, b: f64, rng: &mut R) -> f64 {
    let shape = a + f.num_unique() as f64;
    let rate = b + harmonic(f.num_rows());
    gamma_draw(shape, rng) / rate
}

/// Σᵢ log p(sᵢ | fᵢ, α_b, κ) with η integrated out.
pub fn concentration_log_likelihood(alpha_b: f64, kappa: f64, states: &[Vec<usize>], f: &FeatureMatrix) -> f64 {
    states
        .iter()
        .enumerate()
        .map(|(i, s)| transition_log_likelihood(s, f.row(i), alpha_b, kappa))
        .sum()
}

/// log-target ratio for a multiplicative random-walk move x → x' with
/// Gamma(a, b) prior; includes the x'/x Jacobian of the log-space proposal.
fn log_walk_ratio(x: f64, proposal: f64, a: f64, b: f64, ll_cur: f64, ll_prop: f64) -> f64 {
    ln_gamma_density(proposal, a, b) - ln_gamma_density(x, a, b) + ll_prop - ll_cur + (proposal / x).ln()
}

/// Alternating MH updates of α_b | κ and κ | α_b.
pub fn mh_concentration<R: Rng + ?Sized>(
    current: (f64, f64),
    priors: &HyperPriors,
    states: &[Vec<usize>],
    f: &FeatureMatrix,
    rng: &mut R,
) -> (f64, f64) {
    let (mut alpha, mut kappa) = current;
    let mut ll = concentration_log_likelihood(alpha, kappa, states, f);

    let prop = alpha * (MH_STEP * crate::stats::std_normal(rng)).exp();
    let ll_prop = concentration_log_likelihood(prop, kappa, states, f);
    if accept(log_walk_ratio(alpha, prop, priors.a_alpha, priors.b_alpha, ll, ll_prop), rng) {
        alpha = prop;
        ll = ll_prop;
    }

    let prop = kappa * (MH_STEP * crate::stats::std_normal(rng)).exp();
    let ll_prop = concentration_log_likelihood(alpha, prop, states, f);
    if accept(log_walk_ratio(kappa, prop, priors.a_kappa, priors.b_kappa, ll, ll_prop), rng) {
        kappa = prop;
    }
    (alpha, kappa)
}

/// Feature-to-feature similarity used by the nested clustering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NestedSimilarity {
    #[default]
    Bspcm,
    /// No two features are similar; every feature is its own group.
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcscConfig {
    /// α of the nested SPCM-CRP.
    pub alpha_crp: f64,
    /// B-SPCM tolerance.
    pub tau: f64,
    pub max_iter: usize,
    pub seed: u64,
    /// Z-score each dimension before sampling.
    pub standardize: bool,
    pub split_merge_moves: usize,
    pub emission_prior: Option<NiwParams>,
    pub nested_similarity: NestedSimilarity,
    pub record_chain: bool,
}

impl Default for IcscConfig {
    fn default() -> Self {
        IcscConfig {
            alpha_crp: 1.0,
            tau: 1.0,
            max_iter: 500,
            seed: 0,
            standardize: false,
            split_merge_moves: 10,
            emission_prior: None,
            nested_similarity: NestedSimilarity::Bspcm,
            record_chain: false,
        }
    }
}

impl IcscConfig {
    fn validate(&self) -> Result<()> {
        if !(self.alpha_crp > 0.0) || !(self.tau > 0.0) {
            return Err(Error::InvalidArgument("alpha and tau must be positive".into()));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidArgument("max_iter must be at least 1".into()));
        }
        Ok(())
    }

    fn hmm_config(&self) -> IbpHmmConfig {
        IbpHmmConfig {
            iterations: self.max_iter,
            seed: self.seed,
            split_merge_moves: self.split_merge_moves,
            emission_prior: self.emission_prior.clone(),
            hyper: HyperPriors::default(),
            record_chain: self.record_chain,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcscState {
    pub features: FeatureMatrix,
    pub weights: TransitionWeights,
    pub states: Vec<Vec<usize>>,
    pub emissions: Vec<GaussianParams>,
    /// Z over the K emissions.
    pub feature_clusters: TableLabels,
    /// λ_φ of the nested clustering.
    pub embedding_prior: NiwParams,
    /// λ_θ.
    pub emission_prior: NiwParams,
    pub gamma: f64,
    pub log_joint: f64,
}

impl IcscState {
    pub fn num_features(&self) -> usize {
        self.features.num_features()
    }

    pub fn num_clusters(&self) -> usize {
        self.feature_clusters.count
    }

    /// State sequences with each feature replaced by its group in Z.
    pub fn invariant_states(&self) -> Vec<Vec<usize>> {
        let z = &self.feature_clusters.labels;
        self.states.iter().map(|s| s.iter().map(|k| z[*k]).collect()).collect()
    }

    fn from_parts(hmm: &HmmState, nested: &NestedFit, emission_prior: &NiwParams, log_joint: f64) -> Self {
        IcscState {
            features: hmm.features.clone(),
            weights: hmm.weights.clone(),
            states: hmm.states.clone(),
            emissions: hmm.emissions.clone(),
            feature_clusters: nested.labels.clone(),
            embedding_prior: nested.prior.clone(),
            emission_prior: emission_prior.clone(),
            gamma: hmm.gamma,
            log_joint,
        }
    }
}

#[derive(Debug, Clone)]
pub struct IcscRun {
    pub trace: Vec<IterationSummary>,
    pub chain: Vec<IcscState>,
    pub selected: IcscState,
    pub selected_iteration: usize,
    pub moves: MoveStats,
}

/// MAP of a short SPCM-CRP chain over the emission covariances.
#[derive(Debug, Clone)]
pub struct NestedFit {
    pub links: SeatingAssignments,
    pub labels: TableLabels,
    pub log_posterior: f64,
    pub prior: NiwParams,
}

/// Clusters emission covariances: B-SPCM similarities, spectral embedding,
/// then `iterations` Gibbs sweeps from `warm` (or all-singleton links).
pub fn cluster_emissions<R: Rng + ?Sized>(
    emissions: &[GaussianParams],
    tau: f64,
    alpha: f64,
    similarity: NestedSimilarity,
    iterations: usize,
    warm: Option<&SeatingAssignments>,
    rng: &mut R,
) -> Result<NestedFit> {
    let k = emissions.len();
    let affinity = match similarity {
        NestedSimilarity::Bspcm => {
            let covs: Vec<SpdMatrix> = emissions.iter().map(|e| e.covariance.clone()).collect();
            pairwise_matrix(&covs, SimilarityKind::Bspcm, tau)?.to_affinity()
        }
        NestedSimilarity::Identity => DMatrix::identity(k, k),
    };
    let y = crate::spectral_embedding::embed_affinity(&affinity, None)?.coords;
    let prior = nested_prior(&y)?;
    let start = match warm {
        Some(l) if l.links.len() == k => l.clone(),
        _ => SeatingAssignments::singletons(k),
    };
    let mut sampler = CrpSampler::with_links(&y, &affinity, alpha, prior, &start)?;
    let run = sampler.run(iterations, false, rng)?;
    Ok(NestedFit { links: run.map.links, labels: run.map.labels, log_posterior: run.map.log_posterior, prior: run.prior })
}

/// Prior on embedded feature clusters. Embedding rows have unit norm, so the
/// scale is fixed rather than estimated from a handful of points.
pub fn nested_prior(y: &DMatrix<f64>) -> Result<NiwParams> {
    let p = y.ncols();
    let mean = DVector::from_iterator(p, y.column_iter().map(|c| c.mean()));
    let dof = p as f64 + 3.0;
    let scale = DMatrix::identity(p, p) * (NESTED_CLUSTER_VAR * (dof - p as f64 - 1.0));
    NiwParams::new(mean, NESTED_KAPPA, scale, dof)
}

fn joint(hmm: &IbpHmm, nested: &NestedFit) -> Result<f64> {
    Ok(hmm.collapsed_log_posterior()? + nested.log_posterior)
}

fn prepare(x: &TimeSeriesSet, cfg: &IcscConfig) -> Result<(TimeSeriesSet, NiwParams)> {
    cfg.validate()?;
    let data = if cfg.standardize { x.standardized() } else { x.clone() };
    let prior = match &cfg.emission_prior {
        Some(p) => p.clone(),
        None => default_emission_prior(&data)?,
    };
    Ok((data, prior))
}

/// Coupled sampler; the returned state maximizes the joint log posterior.
pub fn run_icsc(x: &TimeSeriesSet, cfg: &IcscConfig) -> Result<IcscRun> {
    let (data, prior) = prepare(x, cfg)?;
    let mut rng = crate::rng_from_seed(cfg.seed);
    let m = data.len();
    let mut hmm = IbpHmm::new(data, prior.clone(), HyperPriors::default(), &mut rng)?;
    hmm.split_merge_moves = cfg.split_merge_moves;
    let mut nested: Option<NestedFit> = None;
    let mut trace = Vec::with_capacity(cfg.max_iter);
    let mut chain = Vec::new();
    let mut best: Option<(usize, IcscState)> = None;
    for it in 1..=cfg.max_iter {
        hmm.sweep_core(&mut rng)?;
        let k = hmm.state.num_features();
        let warm = nested.as_ref().filter(|n| n.links.links.len() == k).map(|n| n.links.clone());
        let iterations = if warm.is_some() { WARM_ITERATIONS } else { FRESH_ITERATIONS };
        let fit = cluster_emissions(
            &hmm.state.emissions,
            cfg.tau,
            cfg.alpha_crp,
            cfg.nested_similarity,
            iterations,
            warm.as_ref(),
            &mut rng,
        )?;
        hmm.hyper = couple_hyperpriors(k, fit.labels.count, m);
        hmm.sample_hyper(&mut rng);
        let lj = joint(&hmm, &fit)?;
        trace.push(summary(it, lj, &hmm.state, fit.labels.count));
        let state = IcscState::from_parts(&hmm.state, &fit, &prior, lj);
        if best.as_ref().is_none_or(|(_, b)| lj > b.log_joint) {
            best = Some((it, state.clone()));
        }
        if cfg.record_chain {
            chain.push(state);
        }
        nested = Some(fit);
    }
    let (selected_iteration, selected) = best.expect("max_iter validated");
    Ok(IcscRun { trace, chain, selected, selected_iteration, moves: hmm.moves })
}

fn summary(iteration: usize, lp: f64, st: &HmmState, k_z: usize) -> IterationSummary {
    IterationSummary {
        iteration,
        log_posterior: lp,
        k: st.num_features(),
        k_z,
        gamma: st.gamma,
        alpha_b: st.weights.alpha_b,
        kappa: st.weights.kappa,
    }
}

/// IBP-HMM alone, then an SPCM-CRP run (`max_iter` sweeps) on the emissions
/// of its selected state.
pub fn run_decoupled(x: &TimeSeriesSet, cfg: &IcscConfig) -> Result<IcscRun> {
    let (data, prior) = prepare(x, cfg)?;
    let mut hcfg = cfg.hmm_config();
    hcfg.emission_prior = Some(prior.clone());
    let ibp = crate::ibp_hmm::run_ibp(&data, &hcfg)?;
    let mut rng = crate::rng_from_seed(cfg.seed.wrapping_add(1));
    let fit = cluster_emissions(
        &ibp.selected.emissions,
        cfg.tau,
        cfg.alpha_crp,
        cfg.nested_similarity,
        cfg.max_iter,
        None,
        &mut rng,
    )?;
    let lp = ibp.trace[ibp.selected_iteration - 1].log_posterior + fit.log_posterior;
    let selected = IcscState::from_parts(&ibp.selected, &fit, &prior, lp);
    let chain = ibp
        .chain
        .iter()
        .map(|s| {
            let k = s.num_features();
            let labels = TableLabels::from_labels(&(0..k).collect::<Vec<_>>());
            let solo = NestedFit {
                links: SeatingAssignments::singletons(k),
                labels,
                log_posterior: 0.0,
                prior: fit.prior.clone(),
            };
            IcscState::from_parts(s, &solo, &prior, f64::NAN)
        })
        .collect();
    let mut trace = ibp.trace;
    if let Some(last) = trace.get_mut(ibp.selected_iteration - 1) {
        last.k_z = fit.labels.count;
    }
    Ok(IcscRun { trace, chain, selected, selected_iteration: ibp.selected_iteration, moves: ibp.moves })
}
