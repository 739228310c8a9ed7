//! Moments of the univariate tilted distributions
//! `Q(h) ∝ ψ(h)·N(h; μ, Σ)` for the three exact site measures:
//! spike-and-slab (weight sites), the hard sign constraint `Θ(h)` and the
//! label-noise mixture `ηΘ(h) + (1-η)Θ(-h)` (example sites).
//!
//! Partition functions are carried as logarithms. The variance is returned
//! alongside the raw second moment because in the deep tails of the
//! constraint families `⟨h²⟩ - ⟨h⟩²` loses most of its digits.

use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_1_SQRT_2;
use thiserror::Error;

use crate::special::{
    gauss_log_pdf, laplace_fraction, log_add_exp, mills_ratio, norm_log_cdf, norm_log_pdf,
    LAPLACE_SWITCH,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MomentError {
    #[error("invalid cavity (mu = {mu}, sigma = {sigma}): need finite mu and finite sigma > 0")]
    InvalidCavity { mu: f64, sigma: f64 },
    #[error("invalid prior parameter {name} = {value}: {reason}")]
    InvalidPrior {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },
    #[error("tilted partition function vanishes (log Z = {log_z})")]
    DegeneratePartition { log_z: f64 },
    #[error("non-finite tilted moments (mean = {mean}, var = {var})")]
    NonFinite { mean: f64, var: f64 },
}

/// Marginal cavity Gaussian `N(h; mu, sigma)`; `sigma` is a variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CavityParams {
    pub mu: f64,
    pub sigma: f64,
}

impl CavityParams {
    pub fn new(mu: f64, sigma: f64) -> Result<Self, MomentError> {
        let c = Self { mu, sigma };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), MomentError> {
        if self.mu.is_finite() && self.sigma.is_finite() && self.sigma > 0.0 {
            Ok(())
        } else {
            Err(MomentError::InvalidCavity {
                mu: self.mu,
                sigma: self.sigma,
            })
        }
    }
}

/// `(1-ρ)δ(w) + ρ·N(w; 0, 1/λ)`
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpikeSlabParams {
    pub rho: f64,
    /// Slab precision.
    pub lambda: f64,
}

impl SpikeSlabParams {
    pub fn new(rho: f64, lambda: f64) -> Result<Self, MomentError> {
        let p = Self { rho, lambda };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), MomentError> {
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(MomentError::InvalidPrior {
                name: "rho",
                value: self.rho,
                reason: "must lie in [0, 1]",
            });
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(MomentError::InvalidPrior {
                name: "lambda",
                value: self.lambda,
                reason: "must be finite and > 0",
            });
        }
        Ok(())
    }
}

/// `ηΘ(h) + (1-η)Θ(-h)`, restricted to `η ∈ [0.5, 1]`.
///
/// `η < 0.5` is the same model with every label negated, so it is rejected
/// rather than silently accepted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThetaMixtureParams {
    pub eta: f64,
}

impl ThetaMixtureParams {
    pub fn new(eta: f64) -> Result<Self, MomentError> {
        let p = Self { eta };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), MomentError> {
        if (0.5..=1.0).contains(&self.eta) {
            Ok(())
        } else {
            Err(MomentError::InvalidPrior {
                name: "eta",
                value: self.eta,
                reason: "must lie in [0.5, 1]",
            })
        }
    }
}

/// Exact site measure of one variable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SitePrior {
    SpikeSlab(SpikeSlabParams),
    Theta,
    ThetaMixture(ThetaMixtureParams),
}

impl SitePrior {
    pub fn validate(&self) -> Result<(), MomentError> {
        match self {
            SitePrior::SpikeSlab(p) => p.validate(),
            SitePrior::Theta => Ok(()),
            SitePrior::ThetaMixture(p) => p.validate(),
        }
    }

    /// Tilted moments against the cavity `cav`.
    pub fn moments(&self, cav: CavityParams) -> Result<MomentTriple, MomentError> {
        match self {
            SitePrior::SpikeSlab(p) => spike_slab_moments(cav, *p),
            SitePrior::Theta => theta_moments(cav),
            SitePrior::ThetaMixture(p) => theta_mixture_moments(cav, *p),
        }
    }
}

/// Log-partition, first and second moment of a tilted distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentTriple {
    pub log_z: f64,
    pub mean: f64,
    pub second: f64,
    /// `second - mean²`, evaluated without the cancellation.
    pub var: f64,
}

impl MomentTriple {
    fn checked(log_z: f64, mean: f64, var: f64) -> Result<Self, MomentError> {
        if log_z == f64::NEG_INFINITY || log_z.is_nan() {
            return Err(MomentError::DegeneratePartition { log_z });
        }
        if !(mean.is_finite() && var.is_finite()) {
            return Err(MomentError::NonFinite { mean, var });
        }
        Ok(Self {
            log_z,
            mean,
            second: var + mean * mean,
            var,
        })
    }
}

pub fn spike_slab_moments(
    cav: CavityParams,
    prior: SpikeSlabParams,
) -> Result<MomentTriple, MomentError> {
    cav.validate()?;
    prior.validate()?;
    let CavityParams { mu, sigma } = cav;
    let SpikeSlabParams { rho, lambda } = prior;

    let log_spike = gauss_log_pdf(0.0, mu, sigma);
    if rho == 0.0 {
        return MomentTriple::checked(log_spike, 0.0, 0.0);
    }

    // slab ∗ cavity: N(μ; 0, Σ + 1/λ), posterior N(μ/(1+λΣ), Σ/(1+λΣ))
    let shrink = 1.0 + lambda * sigma;
    let slab_mean = mu / shrink;
    let slab_var = sigma / shrink;
    let log_slab = gauss_log_pdf(mu, 0.0, sigma + 1.0 / lambda);
    if rho == 1.0 {
        return MomentTriple::checked(log_slab, slab_mean, slab_var);
    }

    let a = (1.0 - rho).ln() + log_spike;
    let b = rho.ln() + log_slab;
    let log_z = log_add_exp(a, b);
    let p_slab = (b - log_z).exp();
    let p_spike = (a - log_z).exp();
    let mean = p_slab * slab_mean;
    let var = p_slab * slab_var + p_slab * p_spike * slab_mean * slab_mean;
    MomentTriple::checked(log_z, mean, var)
}

pub fn theta_moments(cav: CavityParams) -> Result<MomentTriple, MomentError> {
    cav.validate()?;
    let CavityParams { mu, sigma } = cav;
    let sd = sigma.sqrt();
    let alpha = mu / sd;
    let t = -alpha * FRAC_1_SQRT_2;

    if t >= LAPLACE_SWITCH {
        // Deep left tail. With erfcx(t) = 1/(√π K₁):
        //   R = √2 K₁,  α + R = 1/(√2 K₂),  1 - αR - R² = (1/K₃ - 1/(2K₂))/K₂
        let k = laplace_fraction(t);
        let log_z = (0.5 / (std::f64::consts::PI.sqrt() * k.k1)).ln() - t * t;
        let mean = sd * FRAC_1_SQRT_2 / k.k2;
        let var = sigma * (1.0 / k.k3 - 0.5 / k.k2) / k.k2;
        return MomentTriple::checked(log_z, mean, var);
    }

    let r = mills_ratio(alpha);
    let log_z = norm_log_cdf(alpha);
    let mean = mu + sd * r;
    let var = sigma * (1.0 - alpha * r - r * r);
    MomentTriple::checked(log_z, mean, var)
}

pub fn theta_mixture_moments(
    cav: CavityParams,
    prior: ThetaMixtureParams,
) -> Result<MomentTriple, MomentError> {
    cav.validate()?;
    prior.validate()?;
    let eta = prior.eta;
    if eta == 1.0 {
        return theta_moments(cav);
    }
    let CavityParams { mu, sigma } = cav;
    if eta == 0.5 {
        return MomentTriple::checked(0.5f64.ln(), mu, sigma);
    }
    let sd = sigma.sqrt();
    let alpha = mu / sd;
    let log_z = log_add_exp(
        eta.ln() + norm_log_cdf(alpha),
        (1.0 - eta).ln() + norm_log_cdf(-alpha),
    );
    // g = (2η-1)φ(α)/Z plays the role of the Mills ratio
    let g = (2.0 * eta - 1.0) * (norm_log_pdf(alpha) - log_z).exp();
    let mean = mu + sd * g;
    let var = sigma * (1.0 - alpha * g - g * g);
    MomentTriple::checked(log_z, mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn cav(mu: f64, sigma: f64) -> CavityParams {
        CavityParams::new(mu, sigma).unwrap()
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * b.abs().max(1e-300) || (a - b).abs() < 1e-300
    }

    #[test]
    fn spike_slab_full_slab_is_gaussian_product() {
        let m = spike_slab_moments(cav(1.0, 1.0), SpikeSlabParams::new(1.0, 1.0).unwrap()).unwrap();
        assert!(close(m.mean, 0.5, 1e-15));
        assert!(close(m.second, 0.75, 1e-15));
        assert!(close(m.log_z, -0.5 * (4.0 * PI).ln() - 0.25, 1e-14));
    }

    #[test]
    fn spike_slab_pure_spike() {
        let m = spike_slab_moments(cav(0.7, 2.0), SpikeSlabParams::new(0.0, 1.0).unwrap()).unwrap();
        assert_eq!(m.mean, 0.0);
        assert_eq!(m.second, 0.0);
        assert_eq!(m.var, 0.0);
    }

    #[test]
    fn spike_slab_log_space_survives_huge_means() {
        let m =
            spike_slab_moments(cav(1e3, 1e-4), SpikeSlabParams::new(0.25, 1.0).unwrap()).unwrap();
        assert!(m.log_z.is_finite());
        // the spike is exponentially suppressed; result is the slab posterior
        assert!(close(m.mean, 1e3 / (1.0 + 1e-4), 1e-12));
    }

    #[test]
    fn theta_half_normal() {
        let m = theta_moments(cav(0.0, 1.0)).unwrap();
        assert!(close(m.mean, (2.0 / PI).sqrt(), 1e-15));
        assert!(close(m.second, 1.0, 1e-15));
        assert!(close(m.log_z, 0.5f64.ln(), 1e-15));
    }

    #[test]
    fn theta_inactive_constraint() {
        let m = theta_moments(cav(10.0, 1.0)).unwrap();
        assert!(m.mean >= 10.0 && m.mean <= 10.0 + 1e-20);
        assert!((m.var - 1.0).abs() < 1e-6);
    }

    #[test]
    fn theta_tail_branch_is_continuous() {
        let sw = -LAPLACE_SWITCH * std::f64::consts::SQRT_2;
        let a = theta_moments(cav(sw * (1.0 + 1e-13), 1.0)).unwrap();
        let b = theta_moments(cav(sw * (1.0 - 1e-13), 1.0)).unwrap();
        assert!(close(a.mean, b.mean, 1e-10));
        assert!(close(a.var, b.var, 1e-9));
        assert!(close(a.log_z, b.log_z, 1e-12));
    }

    #[test]
    fn theta_extreme_tail_is_exponential() {
        // α → -∞: truncated normal approaches an exponential of rate |μ|/Σ
        let m = theta_moments(cav(-8.0, 1e-4)).unwrap();
        let scale = 1e-4 / 8.0;
        assert!(close(m.mean, scale, 1e-5));
        assert!(close(m.var, scale * scale, 1e-5));
        assert!(m.var > 0.0);
    }

    #[test]
    fn mixture_reductions() {
        let c = cav(0.3, 2.0);
        let half = theta_mixture_moments(c, ThetaMixtureParams::new(0.5).unwrap()).unwrap();
        assert!(close(half.mean, 0.3, 1e-15));
        assert!(close(half.second, 2.09, 1e-15));
        let one =
            theta_mixture_moments(cav(0.0, 1.0), ThetaMixtureParams::new(1.0).unwrap()).unwrap();
        assert!(close(one.mean, (2.0 / PI).sqrt(), 1e-15));
    }

    #[test]
    fn mixture_near_one_approaches_theta() {
        for &(mu, s) in &[(-1.0, 2.0), (0.5, 0.3), (2.0, 1.0)] {
            let t = theta_moments(cav(mu, s)).unwrap();
            let m =
                theta_mixture_moments(cav(mu, s), ThetaMixtureParams::new(1.0 - 1e-14).unwrap())
                    .unwrap();
            assert!(close(m.mean, t.mean, 1e-10), "{mu} {s}");
            assert!(close(m.var, t.var, 1e-10));
        }
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        assert!(CavityParams::new(0.0, 0.0).is_err());
        assert!(CavityParams::new(f64::NAN, 1.0).is_err());
        assert!(SpikeSlabParams::new(1.5, 1.0).is_err());
        assert!(SpikeSlabParams::new(0.5, 0.0).is_err());
        assert!(ThetaMixtureParams::new(0.4).is_err());
    }

    #[test]
    fn theta_mean_is_increasing_in_mu() {
        for &s in &[1e-4, 1e-2, 1.0, 1e2, 1e4] {
            let mut prev = f64::NEG_INFINITY;
            for i in 0..=400 {
                let mu = -8.0 + 0.04 * i as f64;
                let m = theta_moments(cav(mu, s)).unwrap().mean;
                assert!(m > prev, "mu={mu} sigma={s}");
                prev = m;
            }
        }
    }
}
