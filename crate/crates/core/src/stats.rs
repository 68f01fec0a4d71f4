// Small numerical helpers shared by the samplers.

use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use statrs::function::gamma::ln_gamma;

pub(crate) fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    if m == f64::INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Log of the multivariate gamma function Γ_d(a).
pub(crate) fn ln_mvgamma(d: usize, a: f64) -> f64 {
    let d_f = d as f64;
    let mut out = d_f * (d_f - 1.0) / 4.0 * std::f64::consts::PI.ln();
    for j in 0..d {
        out += ln_gamma(a - j as f64 / 2.0);
    }
    out
}

/// Draw an index proportionally to exp(log_w). Entries at -inf are never drawn.
pub(crate) fn sample_log_categorical<R: Rng + ?Sized>(log_w: &[f64], rng: &mut R) -> usize {
    let m = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    debug_assert!(m.is_finite(), "no finite weight");
    let w: Vec<f64> = log_w.iter().map(|x| (x - m).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, wi) in w.iter().enumerate() {
        if u < *wi {
            return i;
        }
        u -= wi;
    }
    // floating-point slack: last positive weight
    w.iter().rposition(|x| *x > 0.0).unwrap_or(0)
}

/// Gamma(shape, rate = 1) draw.
pub(crate) fn gamma_draw<R: Rng + ?Sized>(shape: f64, rng: &mut R) -> f64 {
    let g = Gamma::new(shape, 1.0).expect("positive shape");
    let x: f64 = g.sample(rng);
    // shapes below ~1e-3 can underflow to zero
    x.max(f64::MIN_POSITIVE)
}

pub(crate) fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// ln Gamma(x; shape, rate) density.
pub(crate) fn ln_gamma_pdf(x: f64, shape: f64, rate: f64) -> f64 {
    shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * x.ln() - rate * x
}

pub(crate) fn harmonic(m: usize) -> f64 {
    (1..=m).map(|j| 1.0 / j as f64).sum()
}
