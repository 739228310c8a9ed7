//! EP free energy and the hyperparameter gradients used for online
//! learning of the density `ρ` and the label reliability `η`.
//!
//! With unnormalized Gaussian sites, `log Z_{Q^(k)} = log Z_Q − log Ẑ_k +
//! log Z_k`, where `Ẑ_k` is the integral of site `k` against its cavity and
//! `Z_k` the tilted partition. Then
//! `F = (N+M−1)·log Z_Q − Σ_k log Z_{Q^(k)}`, and only the `Z_k` depend on
//! the prior hyperparameters.

use ndarray::{s, Array1};
use serde::{Deserialize, Serialize};

use crate::ep::{
    assemble_weight_precision, cavity_from_marginal, CavitySummary, DesignMatrix, EpConfig,
    EpError, LabelPrior, Learning, Priors, SiteParams,
};
use crate::special::{erf, gauss_log_pdf, LN_SQRT_2PI};
use crate::tilted::{SpikeSlabParams, ThetaMixtureParams};

pub const RHO_BOUNDS: (f64, f64) = (1e-4, 1.0 - 1e-4);
pub const ETA_BOUNDS: (f64, f64) = (0.5 + 1e-6, 1.0 - 1e-6);
pub const DEFAULT_LR: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearningRates {
    pub rho: f64,
    pub eta: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            rho: DEFAULT_LR,
            eta: DEFAULT_LR,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub rho: f64,
    pub lambda: f64,
    pub eta: f64,
    pub lr_rho: f64,
    pub lr_eta: f64,
}

impl HyperParams {
    pub fn from_priors(p: &Priors, rates: LearningRates) -> Self {
        Self {
            rho: p.weights.rho,
            lambda: p.weights.lambda,
            eta: p.labels.eta(),
            lr_rho: rates.rho,
            lr_eta: rates.eta,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreeEnergyReport {
    pub f_ep: f64,
    /// `log Z_{Q^(k)}` for every site, weights first.
    pub site_terms: Array1<f64>,
    /// `½ ln det Σ_W`
    pub log_det_term: f64,
    pub log_z_q: f64,
}

/// `ln ∫ N(h; μ, Σ)·exp(−(h−a)²/(2d)) dh`
fn log_site_normalizer(mu: f64, sigma: f64, a: f64, d: f64) -> f64 {
    let s = d + sigma;
    0.5 * (d / s).ln() - 0.5 * (mu - a) * (mu - a) / s
}

/// Free energy of the zero-temperature approximation defined by `site`.
///
/// Evaluated at an EP fixed point it is stationary in the site parameters.
pub fn ep_free_energy(
    x: &DesignMatrix,
    site: &SiteParams,
    priors: &Priors,
    cfg: &EpConfig,
) -> Result<FreeEnergyReport, EpError> {
    let n = x.n();
    let g = assemble_weight_precision(x, site)?;
    let (cav, _) = cavity_from_marginal(&g.marginals, site, cfg);
    let quad: f64 = site
        .a
        .iter()
        .zip(site.d.iter())
        .map(|(a, d)| a * a / d)
        .sum();
    let log_det_term = 0.5 * g.log_det_sigma_w;
    let log_z_q = n as f64 * LN_SQRT_2PI + log_det_term + 0.5 * g.shift.dot(&g.w_bar) - 0.5 * quad;

    let len = site.len();
    let mut site_terms = Array1::zeros(len);
    for k in 0..len {
        let c = cav.get(k);
        let t = priors
            .site(k, n)
            .moments(c)
            .map_err(|source| EpError::Moment { site: k, source })?;
        site_terms[k] =
            log_z_q - log_site_normalizer(c.mu, c.sigma, site.a[k], site.d[k]) + t.log_z;
    }
    let f_ep = (len as f64 - 1.0) * log_z_q - site_terms.sum();
    Ok(FreeEnergyReport {
        f_ep,
        site_terms,
        log_det_term,
        log_z_q,
    })
}

/// `Σ_k −ln Z_k(ρ)` over weight cavities, the ρ-dependent part of `F`.
pub fn rho_objective(mu: &[f64], sigma: &[f64], rho: f64, lambda: f64) -> f64 {
    let p = SpikeSlabParams { rho, lambda };
    mu.iter()
        .zip(sigma)
        .map(|(&m, &s)| {
            -crate::tilted::spike_slab_moments(crate::tilted::CavityParams { mu: m, sigma: s }, p)
                .map(|t| t.log_z)
                .unwrap_or(f64::NAN)
        })
        .sum()
}

/// `Σ_k −ln Z_k(η)` over example cavities.
pub fn eta_objective(mu: &[f64], sigma: &[f64], eta: f64) -> f64 {
    let p = ThetaMixtureParams { eta };
    mu.iter()
        .zip(sigma)
        .map(|(&m, &s)| {
            -crate::tilted::theta_mixture_moments(
                crate::tilted::CavityParams { mu: m, sigma: s },
                p,
            )
            .map(|t| t.log_z)
            .unwrap_or(f64::NAN)
        })
        .sum()
}

/// `∂F/∂ρ = Σ_k (N_spike − N_slab)/Z_k` with the slab a Gaussian of
/// precision `λ`.
pub fn grad_rho(mu: &[f64], sigma: &[f64], rho: f64, lambda: f64) -> f64 {
    mu.iter()
        .zip(sigma)
        .map(|(&m, &s)| {
            let log_spike = gauss_log_pdf(0.0, m, s);
            let log_slab = gauss_log_pdf(m, 0.0, s + 1.0 / lambda);
            let log_z =
                crate::special::log_add_exp((1.0 - rho).ln() + log_spike, rho.ln() + log_slab);
            (log_spike - log_z).exp() - (log_slab - log_z).exp()
        })
        .sum()
}

/// `∂F/∂η = Σ_k −2·erf(μ_k/√(2Σ_k)) / (1 + (2η−1)·erf(μ_k/√(2Σ_k)))`
pub fn grad_eta(mu: &[f64], sigma: &[f64], eta: f64) -> f64 {
    mu.iter()
        .zip(sigma)
        .map(|(&m, &s)| {
            let e = erf(m / (2.0 * s).sqrt());
            let denom = (1.0 + (2.0 * eta - 1.0) * e).max(1e-300);
            -2.0 * e / denom
        })
        .sum()
}

/// One projected gradient step.
pub fn hyper_step(h: HyperParams, grad_rho: f64, grad_eta: f64) -> HyperParams {
    HyperParams {
        rho: (h.rho - h.lr_rho * grad_rho).clamp(RHO_BOUNDS.0, RHO_BOUNDS.1),
        eta: (h.eta - h.lr_eta * grad_eta).clamp(ETA_BOUNDS.0, ETA_BOUNDS.1),
        ..h
    }
}

/// Hyperparameter update from the cavities of one sweep. Only the enabled
/// parameters move.
pub fn learning_step(priors: &Priors, cav: &CavitySummary, n: usize, learn: Learning) -> Priors {
    let mut out = *priors;
    if learn.rho {
        let mu = cav.mean.slice(s![..n]);
        let var = cav.var.slice(s![..n]);
        let (mu, var) = (mu.as_slice().unwrap(), var.as_slice().unwrap());
        let g = grad_rho(mu, var, priors.weights.rho, priors.weights.lambda);
        let r = priors.weights.rho - learn.rates.rho * g;
        out.weights.rho = r.clamp(RHO_BOUNDS.0, RHO_BOUNDS.1);
    }
    if learn.eta && cav.mean.len() > n {
        let mu = cav.mean.slice(s![n..]);
        let var = cav.var.slice(s![n..]);
        let (mu, var) = (mu.as_slice().unwrap(), var.as_slice().unwrap());
        let eta = priors.labels.eta();
        let e = eta - learn.rates.eta * grad_eta(mu, var, eta);
        out.labels = LabelPrior::Mixture(ThetaMixtureParams {
            eta: e.clamp(ETA_BOUNDS.0, ETA_BOUNDS.1),
        });
    }
    out
}
