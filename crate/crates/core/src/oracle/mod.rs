//! Independent reference computations used to check the fast paths:
//! adaptive quadrature of tilted moments, importance-sampled posteriors for
//! tiny instances and central finite differences.

pub mod checks;
mod quadrature;

pub use quadrature::{quad_moments, QuadMoments, QuadratureSpec};

use ndarray::{Array1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use thiserror::Error;

use crate::ep::{DesignMatrix, LabelPrior, Priors};
use crate::tilted::MomentError;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OracleError {
    #[error("invalid oracle settings: {0}")]
    InvalidSpec(String),
    #[error("tolerance not reached: estimate {estimate:e}, error bound {error:e}")]
    ToleranceNotReached { estimate: f64, error: f64 },
    #[error(transparent)]
    Moment(#[from] MomentError),
    #[error("effective sample size {ess:.1} below 100; draw more samples")]
    LowEffectiveSampleSize { ess: f64 },
}

/// Central-difference gradient `(f(x+h e_k) − f(x−h e_k))/(2h)`.
pub fn fd_gradient<F>(f: F, point: &[f64], h: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    assert!(h > 0.0, "step must be positive");
    let mut x = point.to_vec();
    (0..point.len())
        .map(|k| {
            x[k] = point[k] + h;
            let up = f(&x);
            x[k] = point[k] - h;
            let down = f(&x);
            x[k] = point[k];
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub const MC_MAX_DIM: usize = 8;
pub const MC_MIN_SAMPLES: usize = 100_000;

#[derive(Debug, Clone, PartialEq)]
pub struct McPosterior {
    pub mean: Array1<f64>,
    pub std_err: Array1<f64>,
    pub ess: f64,
}

/// Importance sampling of the weight posterior with the spike-and-slab
/// prior as proposal; each draw is weighted by the label likelihood.
pub fn mc_posterior(
    x: &DesignMatrix,
    priors: &Priors,
    n_samples: usize,
    seed: u64,
) -> Result<McPosterior, OracleError> {
    let (n, m) = (x.n(), x.m());
    if n > MC_MAX_DIM || m > MC_MAX_DIM {
        return Err(OracleError::InvalidSpec(format!(
            "N = {n}, M = {m}; both must be ≤ {MC_MAX_DIM}"
        )));
    }
    if n_samples < MC_MIN_SAMPLES {
        return Err(OracleError::InvalidSpec(format!(
            "n_samples = {n_samples} < {MC_MIN_SAMPLES}"
        )));
    }
    priors.weights.validate()?;
    let (hit, miss) = match priors.labels {
        LabelPrior::Theta => (1.0, 0.0),
        LabelPrior::Mixture(p) => {
            p.validate()?;
            (p.eta, 1.0 - p.eta)
        }
    };
    let rho = priors.weights.rho;
    let slab = Normal::new(0.0, priors.weights.lambda.sqrt().recip())
        .map_err(|e| OracleError::InvalidSpec(e.to_string()))?;
    let unit = Uniform::new(0.0, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = x.rows();

    let mut w = vec![0.0; n];
    let mut sum_wt = 0.0;
    let mut sum_wt2 = 0.0;
    // Σ w·x, Σ w²·x, Σ w²·x²
    let mut s1 = Array1::<f64>::zeros(n);
    let mut s2 = Array1::<f64>::zeros(n);
    let mut s3 = Array1::<f64>::zeros(n);
    for _ in 0..n_samples {
        for wk in w.iter_mut() {
            *wk = if unit.sample(&mut rng) < rho {
                slab.sample(&mut rng)
            } else {
                0.0
            };
        }
        let mut weight = 1.0;
        for row in rows.axis_iter(Axis(0)) {
            let y: f64 = row.iter().zip(&w).map(|(a, b)| a * b).sum();
            weight *= if y >= 0.0 { hit } else { miss };
        }
        if weight > 0.0 {
            sum_wt += weight;
            sum_wt2 += weight * weight;
            for k in 0..n {
                s1[k] += weight * w[k];
                s2[k] += weight * weight * w[k];
                s3[k] += weight * weight * w[k] * w[k];
            }
        }
    }
    if sum_wt == 0.0 {
        return Err(OracleError::LowEffectiveSampleSize { ess: 0.0 });
    }
    let ess = sum_wt * sum_wt / sum_wt2;
    if ess < 100.0 {
        return Err(OracleError::LowEffectiveSampleSize { ess });
    }
    let mean = &s1 / sum_wt;
    // self-normalized estimator, delta-method variance Σ w²(x − x̄)² / (Σ w)²
    let std_err = Array1::from_iter((0..n).map(|k| {
        let m = mean[k];
        let num = s3[k] - 2.0 * m * s2[k] + m * m * sum_wt2;
        num.max(0.0).sqrt() / sum_wt
    }));
    Ok(McPosterior { mean, std_err, ess })
}
