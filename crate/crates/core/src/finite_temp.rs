//! Finite-temperature reference engine.
//!
//! The constraint `y = X_σ w` is softened into the energy
//! `β/2·|y − X_σ w|²`, so the Gaussian lives on all `N + M` variables with
//! precision `β·E⁻¹ + diag(1/d)`, `E⁻¹ = [[X_σᵀX_σ, −X_σᵀ], [−X_σ, I]]`.
//! Each sweep factors an `(N+M)`-dimensional matrix; this engine exists to
//! cross-check the zero-temperature one, not for speed.

use ndarray::{s, Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::ep::{
    run_with, DesignMatrix, EpConfig, EpError, EpResult, GaussianModel, Marginals, Priors,
    RunOptions, SiteParams,
};
use crate::linalg::Cholesky;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FiniteTempConfig {
    pub beta: f64,
    pub base: EpConfig,
}

impl FiniteTempConfig {
    pub fn validate(&self) -> Result<(), EpError> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(EpError::Config(format!(
                "beta = {} must be finite and > 0",
                self.beta
            )));
        }
        self.base.validate()
    }
}

/// Full `(N+M)`-dimensional Gaussian.
#[derive(Debug, Clone)]
pub struct FullGaussian {
    pub sigma: Array2<f64>,
    pub marginals: Marginals,
}

/// `β·E⁻¹` without the site diagonal.
fn energy_precision(x: &DesignMatrix, beta: f64) -> Array2<f64> {
    let (n, m) = (x.n(), x.m());
    let xr = x.rows();
    let mut p = Array2::zeros((n + m, n + m));
    p.slice_mut(s![..n, ..n]).assign(&(xr.t().dot(&xr) * beta));
    p.slice_mut(s![..n, n..])
        .assign(&(xr.t().to_owned() * -beta));
    p.slice_mut(s![n.., ..n]).assign(&(xr.to_owned() * -beta));
    for t in 0..m {
        p[[n + t, n + t]] = beta;
    }
    p
}

pub fn ft_assemble(
    x: &DesignMatrix,
    site: &SiteParams,
    beta: f64,
) -> Result<FullGaussian, EpError> {
    let len = x.n() + x.m();
    if site.len() != len {
        return Err(EpError::Dimension(format!(
            "site vectors have length {}, expected {len}",
            site.len()
        )));
    }
    let mut p = energy_precision(x, beta);
    for i in 0..len {
        p[[i, i]] += 1.0 / site.d[i];
    }
    let chol = Cholesky::factor(p.view())?;
    let (sigma, _) = chol.inverse();
    let mean = chol.solve((&site.a / &site.d).view());
    let var: Array1<f64> = sigma.diag().to_owned();
    Ok(FullGaussian {
        sigma,
        marginals: Marginals { mean, var },
    })
}

#[derive(Debug, Clone, Copy)]
pub struct FiniteTemperature {
    pub beta: f64,
}

impl GaussianModel for FiniteTemperature {
    fn marginals(&self, x: &DesignMatrix, site: &SiteParams) -> Result<Marginals, EpError> {
        Ok(ft_assemble(x, site, self.beta)?.marginals)
    }

    fn factor_dim(&self, x: &DesignMatrix) -> usize {
        x.n() + x.m()
    }
}

pub fn ft_run(
    x: &DesignMatrix,
    priors: &Priors,
    cfg: &FiniteTempConfig,
) -> Result<EpResult, EpError> {
    cfg.validate()?;
    run_with(
        &FiniteTemperature { beta: cfg.beta },
        x,
        priors,
        &cfg.base,
        RunOptions::default(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::NotPositiveDefinite;
    use ndarray::array;

    #[test]
    fn two_by_two() {
        let x = DesignMatrix::new(array![[1.0]]).unwrap();
        let g = ft_assemble(&x, &SiteParams::init(2), 1.0).unwrap();
        assert!((g.marginals.var[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((g.marginals.var[1] - 2.0 / 3.0).abs() < 1e-15);
        assert!((g.sigma[[0, 1]] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn vacuous_sites_leave_singular_energy() {
        let x = DesignMatrix::new(array![[1.0, 0.5], [0.2, -1.0]]).unwrap();
        let mut site = SiteParams::init(4);
        site.d.fill(1e300);
        let err = ft_assemble(&x, &site, 1.0).unwrap_err();
        assert!(matches!(
            err,
            EpError::NotPositiveDefinite(NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn bad_beta_rejected() {
        let cfg = FiniteTempConfig {
            beta: 0.0,
            base: EpConfig::default(),
        };
        assert!(cfg.validate().is_err());
    }
}
