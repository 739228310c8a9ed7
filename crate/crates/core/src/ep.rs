//! Zero-temperature expectation propagation on the constraint subspace
//! `y = X_σ w`.
//!
//! The variable vector is `h = (w_1..w_N, y_1..y_M)`. Every variable carries
//! a Gaussian site `exp(-(h_i - a_i)²/(2 d_i))`; the Gaussian approximation
//! only needs the `N×N` weight-space precision
//! `Σ_W⁻¹ = diag(1/d_W) + X_σᵀ diag(1/d_Y) X_σ`, factored once per sweep.
//! Cavities come from the marginals by the rank-one removal rule, so a
//! sweep costs `O(MN² + N³)`.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::free_energy::{self, LearningRates};
use crate::linalg::{row_sq_norms, Cholesky, NotPositiveDefinite};
use crate::tilted::{
    CavityParams, MomentError, MomentTriple, SitePrior, SpikeSlabParams, ThetaMixtureParams,
};

pub const DEFAULT_D_MAX: f64 = 1e12;
pub const DEFAULT_VAR_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EpError {
    #[error(transparent)]
    NotPositiveDefinite(#[from] NotPositiveDefinite),
    #[error("site {site}: {source}")]
    Moment {
        site: usize,
        #[source]
        source: MomentError,
    },
    #[error("invalid design matrix: {0}")]
    Design(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// Label-multiplied pattern matrix; row `τ` is `σ_τ x_τᵀ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignMatrix {
    rows: Array2<f64>,
}

impl DesignMatrix {
    /// `rows` is `M × N`. `M = 0` is allowed (no examples).
    pub fn new(rows: Array2<f64>) -> Result<Self, EpError> {
        if rows.ncols() == 0 {
            return Err(EpError::Design("need at least one weight (N ≥ 1)".into()));
        }
        if let Some(bad) = rows.iter().position(|v| !v.is_finite()) {
            return Err(EpError::Design(format!(
                "non-finite entry at flat index {bad}"
            )));
        }
        if let Some(tau) = rows
            .axis_iter(Axis(0))
            .position(|r| r.iter().all(|&v| v == 0.0))
        {
            return Err(EpError::Design(format!("row {tau} is identically zero")));
        }
        Ok(Self { rows })
    }

    /// Build `X_σ` from raw patterns and `±1` labels.
    pub fn from_patterns(patterns: ArrayView2<'_, f64>, labels: &[i8]) -> Result<Self, EpError> {
        if patterns.nrows() != labels.len() {
            return Err(EpError::Dimension(format!(
                "{} patterns but {} labels",
                patterns.nrows(),
                labels.len()
            )));
        }
        let mut rows = patterns.to_owned();
        for (mut r, &s) in rows.axis_iter_mut(Axis(0)).zip(labels) {
            if s < 0 {
                r.mapv_inplace(|v| -v);
            }
        }
        Self::new(rows)
    }

    pub fn rows(&self) -> ArrayView2<'_, f64> {
        self.rows.view()
    }

    /// Weight count `N`.
    pub fn n(&self) -> usize {
        self.rows.ncols()
    }

    /// Example count `M`.
    pub fn m(&self) -> usize {
        self.rows.nrows()
    }
}

/// Gaussian site means `a` and variances `d` for all `N + M` variables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteParams {
    pub a: Array1<f64>,
    pub d: Array1<f64>,
}

impl SiteParams {
    /// `a = 0`, `d = 1` everywhere.
    pub fn init(len: usize) -> Self {
        Self {
            a: Array1::zeros(len),
            d: Array1::ones(len),
        }
    }

    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }

    fn check(&self, len: usize) -> Result<(), EpError> {
        if self.a.len() != len || self.d.len() != len {
            return Err(EpError::Dimension(format!(
                "site vectors have lengths ({}, {}), expected {len}",
                self.a.len(),
                self.d.len()
            )));
        }
        if self.d.iter().any(|&d| !(d > 0.0) || !d.is_finite())
            || self.a.iter().any(|a| !a.is_finite())
        {
            return Err(EpError::Config(
                "site parameters must be finite with d > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Means and variances of the one-dimensional marginals of the Gaussian
/// approximation, weights first then examples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Marginals {
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
}

/// The Gaussian approximation restricted to weight space.
#[derive(Debug, Clone)]
pub struct GaussianSummary {
    pub sigma_w: Array2<f64>,
    pub w_bar: Array1<f64>,
    pub marginals: Marginals,
    /// `ln det Σ_W`
    pub log_det_sigma_w: f64,
    /// `a_W/d_W + X_σᵀ(a_Y/d_Y)`, the precision-weighted mean.
    pub shift: Array1<f64>,
}

/// Cavity means `h̄_i^(i)` and variances `Σ_ii^(i)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CavitySummary {
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
}

impl CavitySummary {
    pub fn get(&self, i: usize) -> CavityParams {
        CavityParams {
            mu: self.mean[i],
            sigma: self.var[i],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpConfig {
    /// Fraction `γ` of the old natural parameters kept at each update.
    pub damping: f64,
    pub eps_stop: f64,
    pub max_iter: usize,
    pub d_max: f64,
    pub var_floor: f64,
    /// Initial variance of the example sites (weight sites start at 1).
    #[serde(default = "unit")]
    pub init_example_var: f64,
}

fn unit() -> f64 {
    1.0
}

impl Default for EpConfig {
    fn default() -> Self {
        Self::noiseless()
    }
}

impl EpConfig {
    /// Settings used for sign-consistent (noise-free) labels.
    pub fn noiseless() -> Self {
        Self {
            damping: 0.9995,
            eps_stop: 1e-4,
            max_iter: 50_000,
            d_max: DEFAULT_D_MAX,
            var_floor: DEFAULT_VAR_FLOOR,
            init_example_var: 1.0,
        }
    }

    /// Settings used with the label-noise mixture.
    pub fn noisy() -> Self {
        Self {
            damping: 0.99,
            eps_stop: 1e-6,
            ..Self::noiseless()
        }
    }

    pub fn validate(&self) -> Result<(), EpError> {
        if !(0.0..1.0).contains(&self.damping) {
            return Err(EpError::Config(format!(
                "damping {} not in [0, 1)",
                self.damping
            )));
        }
        if !(self.eps_stop > 0.0) {
            return Err(EpError::Config(format!(
                "eps_stop {} must be > 0",
                self.eps_stop
            )));
        }
        if !(self.init_example_var > 0.0 && self.init_example_var.is_finite()) {
            return Err(EpError::Config(format!(
                "init_example_var {} must be finite and > 0",
                self.init_example_var
            )));
        }
        if self.max_iter == 0 {
            return Err(EpError::Config("max_iter must be positive".into()));
        }
        if !(self.var_floor > 0.0 && self.d_max > self.var_floor && self.d_max.is_finite()) {
            return Err(EpError::Config(format!(
                "need 0 < var_floor < d_max < ∞ (got {}, {})",
                self.var_floor, self.d_max
            )));
        }
        Ok(())
    }
}

/// Measure on the example variables `y_τ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LabelPrior {
    Theta,
    Mixture(ThetaMixtureParams),
}

impl LabelPrior {
    pub fn eta(&self) -> f64 {
        match self {
            LabelPrior::Theta => 1.0,
            LabelPrior::Mixture(p) => p.eta,
        }
    }
}

/// Spike-and-slab on every weight, one label measure on every example.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Priors {
    pub weights: SpikeSlabParams,
    pub labels: LabelPrior,
}

impl Priors {
    pub fn new(weights: SpikeSlabParams, labels: LabelPrior) -> Self {
        Self { weights, labels }
    }

    pub fn site(&self, i: usize, n: usize) -> SitePrior {
        if i < n {
            SitePrior::SpikeSlab(self.weights)
        } else {
            match self.labels {
                LabelPrior::Theta => SitePrior::Theta,
                LabelPrior::Mixture(p) => SitePrior::ThetaMixture(p),
            }
        }
    }

    pub fn validate(&self) -> Result<(), EpError> {
        self.weights
            .validate()
            .map_err(|source| EpError::Moment { site: 0, source })?;
        if let LabelPrior::Mixture(p) = self.labels {
            p.validate()
                .map_err(|source| EpError::Moment { site: 0, source })?;
        }
        Ok(())
    }
}

/// Build and factor the weight-space precision, then read off all marginals.
pub fn assemble_weight_precision(
    x: &DesignMatrix,
    site: &SiteParams,
) -> Result<GaussianSummary, EpError> {
    let (n, m) = (x.n(), x.m());
    site.check(n + m)?;
    let xr = x.rows();
    let d_w = site.d.slice(s![..n]);
    let d_y = site.d.slice(s![n..]);
    let a_w = site.a.slice(s![..n]);
    let a_y = site.a.slice(s![n..]);

    // X_σᵀ diag(1/d_Y) X_σ as (D^{-1/2}X)ᵀ(D^{-1/2}X)
    let mut scaled = xr.to_owned();
    for (mut row, &d) in scaled.axis_iter_mut(Axis(0)).zip(d_y.iter()) {
        row *= d.sqrt().recip();
    }
    let mut precision = scaled.t().dot(&scaled);
    for k in 0..n {
        precision[[k, k]] += 1.0 / d_w[k];
    }

    let chol = Cholesky::factor(precision.view())?;
    let (sigma_w, linv) = chol.inverse();

    let shift = &a_w / &d_w + xr.t().dot(&(&a_y / &d_y));
    let w_bar = sigma_w.dot(&shift);

    let mut mean = Array1::zeros(n + m);
    let mut var = Array1::zeros(n + m);
    mean.slice_mut(s![..n]).assign(&w_bar);
    var.slice_mut(s![..n]).assign(&sigma_w.diag());
    if m > 0 {
        mean.slice_mut(s![n..]).assign(&xr.dot(&w_bar));
        // x Σ_W xᵀ = |L⁻¹ xᵀ|²
        let proj = xr.dot(&linv.t());
        var.slice_mut(s![n..]).assign(&row_sq_norms(proj.view()));
    }

    Ok(GaussianSummary {
        sigma_w,
        w_bar,
        marginals: Marginals { mean, var },
        log_det_sigma_w: -chol.log_det(),
        shift,
    })
}

/// Remove each site from its marginal.
///
/// Returns the cavities and the number of clamp events (a non-positive
/// cavity precision is replaced by `1/d_max`, small variances by the floor).
pub fn cavity_from_marginal(
    marg: &Marginals,
    site: &SiteParams,
    cfg: &EpConfig,
) -> (CavitySummary, usize) {
    let len = marg.mean.len();
    let mut mean = Array1::zeros(len);
    let mut var = Array1::zeros(len);
    let mut clamps = 0;
    for i in 0..len {
        let s_ii = marg.var[i];
        let (a, d) = (site.a[i], site.d[i]);
        let denom = 1.0 - s_ii / d;
        let (mut v, mu);
        if denom > 1e-12 {
            v = s_ii / denom;
            mu = (marg.mean[i] - s_ii * a / d) / denom;
        } else {
            clamps += 1;
            v = cfg.d_max;
            mu = marg.mean[i];
        }
        if v < cfg.var_floor {
            clamps += 1;
            v = cfg.var_floor;
        }
        mean[i] = mu;
        var[i] = v;
    }
    (CavitySummary { mean, var }, clamps)
}

/// Moment-matching proposal for one site, damped in natural parameters.
/// Returns the new `(a_i, d_i)` and whether a clamp was applied.
pub fn site_update(
    cav: CavityParams,
    tilted: &MomentTriple,
    cfg: &EpConfig,
    old_a: f64,
    old_d: f64,
) -> (f64, f64, bool) {
    let v = tilted.var.max(cfg.var_floor);
    let mut clamped = v != tilted.var;
    let min_prec = 1.0 / cfg.d_max;
    let mut prec = 1.0 / v - 1.0 / cav.sigma;
    if !(prec >= min_prec) {
        prec = min_prec;
        clamped = true;
    }
    // a*/d* = ⟨h⟩/d* + (⟨h⟩ - μ)/Σ
    let lin = tilted.mean * prec + (tilted.mean - cav.mu) / cav.sigma;
    let g = cfg.damping;
    let old_prec = 1.0 / old_d;
    let new_prec = g * old_prec + (1.0 - g) * prec;
    let new_lin = g * old_a * old_prec + (1.0 - g) * lin;
    (new_lin / new_prec, 1.0 / new_prec, clamped)
}

/// A Gaussian approximation family: something that turns site parameters
/// into marginals.
pub trait GaussianModel {
    fn marginals(&self, x: &DesignMatrix, site: &SiteParams) -> Result<Marginals, EpError>;

    /// Side length of the matrix factored per sweep.
    fn factor_dim(&self, x: &DesignMatrix) -> usize;
}

/// The constrained (`β → ∞`) model.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroTemperature;

impl GaussianModel for ZeroTemperature {
    fn marginals(&self, x: &DesignMatrix, site: &SiteParams) -> Result<Marginals, EpError> {
        Ok(assemble_weight_precision(x, site)?.marginals)
    }

    fn factor_dim(&self, x: &DesignMatrix) -> usize {
        x.n()
    }
}

/// Output of one parallel sweep.
#[derive(Debug, Clone)]
pub struct Sweep {
    pub site: SiteParams,
    pub eps: f64,
    pub tilted: Vec<MomentTriple>,
    /// Cavities the updates were computed from.
    pub cavity: CavitySummary,
    pub marginals: Marginals,
    pub clamps: usize,
}

/// `max_i |Δ⟨h_i⟩| + |Δ⟨h_i²⟩|` between consecutive tilted moments.
pub fn moment_change(new: &[MomentTriple], old: Option<&[MomentTriple]>) -> f64 {
    new.iter()
        .enumerate()
        .map(|(i, t)| {
            let (m0, s0) = old.map_or((0.0, 0.0), |o| (o[i].mean, o[i].second));
            (t.mean - m0).abs() + (t.second - s0).abs()
        })
        .fold(0.0, f64::max)
}

/// One full parallel sweep with a generic Gaussian model.
pub fn sweep_with<G: GaussianModel + ?Sized>(
    model: &G,
    x: &DesignMatrix,
    priors: &Priors,
    cfg: &EpConfig,
    state: &SiteParams,
    prev: Option<&[MomentTriple]>,
) -> Result<Sweep, EpError> {
    let n = x.n();
    let marginals = model.marginals(x, state)?;
    let (cavity, mut clamps) = cavity_from_marginal(&marginals, state, cfg);
    let len = state.len();
    let mut tilted = Vec::with_capacity(len);
    for i in 0..len {
        let t = priors
            .site(i, n)
            .moments(cavity.get(i))
            .map_err(|source| EpError::Moment { site: i, source })?;
        tilted.push(t);
    }
    let mut next = state.clone();
    for i in 0..len {
        let (a, d, c) = site_update(cavity.get(i), &tilted[i], cfg, state.a[i], state.d[i]);
        next.a[i] = a;
        next.d[i] = d;
        clamps += c as usize;
    }
    let eps = moment_change(&tilted, prev);
    Ok(Sweep {
        site: next,
        eps,
        tilted,
        cavity,
        marginals,
        clamps,
    })
}

/// One zero-temperature sweep.
pub fn ep_iterate(
    x: &DesignMatrix,
    priors: &Priors,
    cfg: &EpConfig,
    state: &SiteParams,
    prev: Option<&[MomentTriple]>,
) -> Result<Sweep, EpError> {
    sweep_with(&ZeroTemperature, x, priors, cfg, state, prev)
}

/// Per-iteration diagnostic row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub eps: f64,
    pub clamps: usize,
    pub rho: f64,
    pub eta: f64,
}

/// Which hyperparameters to learn online, one gradient step per sweep.
///
/// Steps start at the first sweep whose `ε_t` is below `warmup_eps`. While
/// learning, a run only counts as converged when the hyperparameter change
/// of the last sweep is also below `eps_stop`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Learning {
    pub rho: bool,
    pub eta: bool,
    pub rates: LearningRates,
    pub warmup_eps: f64,
}

impl Learning {
    pub fn new(rho: bool, eta: bool, rates: LearningRates) -> Self {
        Self {
            rho,
            eta,
            rates,
            warmup_eps: f64::INFINITY,
        }
    }
}

#[derive(Default)]
pub struct RunOptions<'a> {
    pub learning: Option<Learning>,
    pub init: Option<SiteParams>,
    pub trace: Option<&'a mut dyn FnMut(&IterationRecord)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpResult {
    pub converged: bool,
    pub iterations: usize,
    pub eps_final: f64,
    pub tilted_mean: Array1<f64>,
    pub tilted_var: Array1<f64>,
    pub site: SiteParams,
    /// Cavities of the last sweep.
    pub cavity: CavitySummary,
    /// Priors at exit (differ from the input when learning is on).
    pub priors: Priors,
    pub clamp_events: usize,
    pub n: usize,
}

impl EpResult {
    /// Posterior mean estimates `⟨w_i⟩` from the tilted marginals.
    pub fn weight_means(&self) -> ArrayView1<'_, f64> {
        self.tilted_mean.slice(s![..self.n])
    }

    pub fn weight_std(&self) -> Array1<f64> {
        self.tilted_var
            .slice(s![..self.n])
            .mapv(|v| v.max(0.0).sqrt())
    }
}

/// Iterate sweeps until `ε_t < eps_stop` or `max_iter`.
pub fn run_with<G: GaussianModel + ?Sized>(
    model: &G,
    x: &DesignMatrix,
    priors: &Priors,
    cfg: &EpConfig,
    mut opts: RunOptions<'_>,
) -> Result<EpResult, EpError> {
    cfg.validate()?;
    priors.validate()?;
    let (n, m) = (x.n(), x.m());
    let mut site = opts.init.take().unwrap_or_else(|| {
        let mut s = SiteParams::init(n + m);
        s.d.slice_mut(s![n..]).fill(cfg.init_example_var);
        s
    });
    site.check(n + m)?;
    let mut priors = *priors;
    let mut prev: Option<Vec<MomentTriple>> = None;
    let mut clamp_events = 0;
    let mut last: Option<Sweep> = None;
    let mut converged = false;
    let mut iterations = 0;
    let mut learning_on = false;

    for it in 1..=cfg.max_iter {
        let sw = sweep_with(model, x, &priors, cfg, &site, prev.as_deref())?;
        iterations = it;
        clamp_events += sw.clamps;
        let mut hyper_change = 0.0;
        if let Some(learn) = opts.learning {
            learning_on |= sw.eps < learn.warmup_eps;
            if learning_on {
                let next = free_energy::learning_step(&priors, &sw.cavity, n, learn);
                hyper_change = (next.weights.rho - priors.weights.rho).abs()
                    + (next.labels.eta() - priors.labels.eta()).abs();
                priors = next;
            } else {
                hyper_change = f64::INFINITY;
            }
        }
        if let Some(trace) = opts.trace.as_mut() {
            trace(&IterationRecord {
                iteration: it,
                eps: sw.eps,
                clamps: sw.clamps,
                rho: priors.weights.rho,
                eta: priors.labels.eta(),
            });
        }
        site = sw.site.clone();
        let eps = sw.eps;
        prev = Some(sw.tilted.clone());
        last = Some(sw);
        if eps < cfg.eps_stop && hyper_change < cfg.eps_stop {
            converged = true;
            break;
        }
    }

    let last = last.expect("max_iter ≥ 1");
    Ok(EpResult {
        converged,
        iterations,
        eps_final: last.eps,
        tilted_mean: last.tilted.iter().map(|t| t.mean).collect(),
        tilted_var: last.tilted.iter().map(|t| t.var).collect(),
        site,
        cavity: last.cavity,
        priors,
        clamp_events,
        n,
    })
}

/// Zero-temperature EP to a fixed point.
pub fn ep_run(x: &DesignMatrix, priors: &Priors, cfg: &EpConfig) -> Result<EpResult, EpError> {
    run_with(&ZeroTemperature, x, priors, cfg, RunOptions::default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn theta_priors(rho: f64) -> Priors {
        Priors::new(SpikeSlabParams::new(rho, 1.0).unwrap(), LabelPrior::Theta)
    }

    #[test]
    fn scalar_assembly() {
        let x = DesignMatrix::new(array![[1.0]]).unwrap();
        let g = assemble_weight_precision(&x, &SiteParams::init(2)).unwrap();
        assert!((g.sigma_w[[0, 0]] - 0.5).abs() < 1e-15);
        assert_eq!(g.w_bar[0], 0.0);
        assert!((g.marginals.var[0] - 0.5).abs() < 1e-15);
        assert!((g.marginals.var[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn uninformative_sites_leave_rank_deficient_precision() {
        // N = 3, M = 1, all d huge: precision ≈ 0 → pivot breakdown
        let x = DesignMatrix::new(array![[1.0, 2.0, 3.0]]).unwrap();
        let mut site = SiteParams::init(4);
        site.d.fill(1e300);
        site.d[3] = 1.0;
        let err = assemble_weight_precision(&x, &site).unwrap_err();
        assert!(matches!(
            err,
            EpError::NotPositiveDefinite(NotPositiveDefinite { pivot: 1, .. })
        ));
    }

    #[test]
    fn vacuous_site_cavity_equals_marginal() {
        let marg = Marginals {
            mean: array![0.3],
            var: array![0.7],
        };
        let site = SiteParams {
            a: array![5.0],
            d: array![1e30],
        };
        let (c, clamps) = cavity_from_marginal(&marg, &site, &EpConfig::default());
        assert_eq!(clamps, 0);
        assert!((c.var[0] - 0.7).abs() < 1e-12);
        assert!((c.mean[0] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn half_weight_site_doubles_cavity() {
        let marg = Marginals {
            mean: array![0.4],
            var: array![1.0],
        };
        let site = SiteParams {
            a: array![0.0],
            d: array![2.0],
        };
        let (c, _) = cavity_from_marginal(&marg, &site, &EpConfig::default());
        assert!((c.var[0] - 2.0).abs() < 1e-15);
        assert!((c.mean[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn site_update_arithmetic() {
        let cfg = EpConfig {
            damping: 0.0,
            ..EpConfig::default()
        };
        let t = MomentTriple {
            log_z: 0.0,
            mean: 0.2,
            second: 0.54,
            var: 0.5,
        };
        let (a, d, clamped) = site_update(
            CavityParams {
                mu: 0.0,
                sigma: 1.0,
            },
            &t,
            &cfg,
            0.0,
            1.0,
        );
        assert!(!clamped);
        assert!((d - 1.0).abs() < 1e-15);
        assert!((a - 0.4).abs() < 1e-15);
    }

    #[test]
    fn site_update_noop_site_clamps_to_d_max() {
        let cfg = EpConfig {
            damping: 0.0,
            ..EpConfig::default()
        };
        let t = MomentTriple {
            log_z: 0.0,
            mean: 0.3,
            second: 0.3 * 0.3 + 1.5,
            var: 1.5,
        };
        let (a, d, clamped) = site_update(
            CavityParams {
                mu: 0.3,
                sigma: 1.5,
            },
            &t,
            &cfg,
            0.0,
            1.0,
        );
        assert!(clamped);
        assert!((d - cfg.d_max).abs() / cfg.d_max < 1e-12);
        assert!((a - 0.3).abs() < 1e-12);
    }

    #[test]
    fn damping_is_convex_in_natural_parameters() {
        let cfg = EpConfig {
            damping: 0.99,
            ..EpConfig::default()
        };
        let t = MomentTriple {
            log_z: 0.0,
            mean: 0.2,
            second: 0.54,
            var: 0.5,
        };
        let (old_a, old_d) = (-0.3, 4.0);
        let (a, d, _) = site_update(
            CavityParams {
                mu: 0.0,
                sigma: 1.0,
            },
            &t,
            &cfg,
            old_a,
            old_d,
        );
        // proposed: d* = 1, a* = 0.4
        let prec = 0.99 / old_d + 0.01 / 1.0;
        let lin = 0.99 * old_a / old_d + 0.01 * 0.4;
        assert!((1.0 / d - prec).abs() < 1e-15);
        assert!((a / d - lin).abs() < 1e-15);
    }

    #[test]
    fn no_examples_gives_zero_means() {
        let x = DesignMatrix::new(Array2::zeros((0, 4))).unwrap();
        let r = ep_run(&x, &theta_priors(0.3), &EpConfig::noisy()).unwrap();
        assert!(r.converged);
        assert!(r.weight_means().iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn first_sweep_is_well_posed() {
        let x = DesignMatrix::new(array![[1.0, -0.5], [0.3, 2.0], [-1.0, 1.0]]).unwrap();
        let sw = ep_iterate(
            &x,
            &theta_priors(0.5),
            &EpConfig::default(),
            &SiteParams::init(5),
            None,
        )
        .unwrap();
        assert!(sw.eps > 0.0 && sw.eps.is_finite());
    }

    #[test]
    fn design_rejects_zero_rows_and_label_mismatch() {
        assert!(DesignMatrix::new(array![[0.0, 0.0]]).is_err());
        assert!(DesignMatrix::new(Array2::zeros((1, 0))).is_err());
        let p = array![[1.0, 2.0], [3.0, 4.0]];
        assert!(DesignMatrix::from_patterns(p.view(), &[1]).is_err());
        let x = DesignMatrix::from_patterns(p.view(), &[1, -1]).unwrap();
        assert_eq!(x.rows()[[1, 0]], -3.0);
    }

    #[test]
    fn config_validation() {
        let mut c = EpConfig::default();
        c.damping = 1.0;
        assert!(c.validate().is_err());
        c.damping = 0.5;
        c.eps_stop = 0.0;
        assert!(c.validate().is_err());
    }
}
