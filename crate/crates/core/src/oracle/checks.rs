//! Oracle suites: each check compares a production routine against an
//! independent reference and reports the worst discrepancy.

use std::time::Instant;

use ndarray::{s, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::quadrature::{quad_moments, QuadratureSpec};
use super::{fd_gradient, mc_posterior};
use crate::datagen::{flip_labels, label};
use crate::ep::{
    assemble_weight_precision, cavity_from_marginal, ep_run, DesignMatrix, EpConfig, LabelPrior,
    Priors, SiteParams,
};
use crate::free_energy::{eta_objective, grad_eta, grad_rho, rho_objective};
use crate::linalg::Cholesky;
use crate::tilted::{CavityParams, SitePrior, SpikeSlabParams, ThetaMixtureParams};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

fn report(name: &'static str, start: Instant, passed: bool, detail: String) -> CheckReport {
    CheckReport {
        name,
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn log_space(lo: f64, hi: f64, k: usize) -> Vec<f64> {
    let (a, b) = (lo.log10(), hi.log10());
    (0..k)
        .map(|i| 10f64.powf(a + (b - a) * i as f64 / (k - 1) as f64))
        .collect()
}

/// Every family over `μ ∈ [−8, 8]`, `Σ ∈ [1e−4, 1e4]` and the listed prior
/// parameters.
pub fn moment_grid() -> Vec<(SitePrior, CavityParams)> {
    let mus: Vec<f64> = (0..9).map(|i| -8.0 + 2.0 * i as f64).collect();
    let sigmas = log_space(1e-4, 1e4, 5);
    let mut priors = Vec::new();
    for rho in [0.0, 0.1, 0.25, 0.5, 1.0] {
        for lambda in [1e-2, 1.0, 1e4] {
            priors.push(SitePrior::SpikeSlab(SpikeSlabParams { rho, lambda }));
        }
    }
    priors.push(SitePrior::Theta);
    for eta in [0.5, 0.8, 0.95, 1.0] {
        priors.push(SitePrior::ThetaMixture(ThetaMixtureParams { eta }));
    }
    let mut grid = Vec::new();
    for p in &priors {
        for &mu in &mus {
            for &sigma in &sigmas {
                grid.push((*p, CavityParams { mu, sigma }));
            }
        }
    }
    grid
}

/// `|a − b| ≤ max(rel·|b|, abs)`, reported as the ratio to that bound.
fn excess(a: f64, b: f64, rel: f64, abs: f64) -> f64 {
    (a - b).abs() / (rel * b.abs()).max(abs)
}

/// Closed-form tilted moments against adaptive quadrature.
pub fn check_moment_grid(spec: &QuadratureSpec, rel: f64, abs: f64) -> CheckReport {
    let start = Instant::now();
    let grid = moment_grid();
    let mut worst = (0.0, String::new());
    let mut errors = 0;
    for (prior, cav) in &grid {
        let r = prior
            .moments(*cav)
            .map_err(|e| e.to_string())
            .and_then(|t| {
                quad_moments(prior, *cav, spec)
                    .map(|q| (t, q.moments))
                    .map_err(|e| e.to_string())
            });
        match r {
            Ok((t, q)) => {
                let e = excess(t.mean, q.mean, rel, abs).max(excess(t.var, q.var, rel, abs));
                if !(e <= worst.0) && errors == 0 {
                    worst = (e, format!("{prior:?} at {cav:?}"));
                }
            }
            Err(e) => {
                errors += 1;
                worst.1 = format!("{prior:?} at {cav:?}: {e}");
            }
        }
    }
    report(
        "moment-grid",
        start,
        errors == 0 && worst.0 <= 1.0,
        format!(
            "{} points, worst error/tolerance {:.2e} ({}), {errors} quadrature failures",
            grid.len(),
            worst.0,
            worst.1
        ),
    )
}

fn gaussian_design(rng: &mut ChaCha8Rng, n: usize, m: usize) -> DesignMatrix {
    let rows = Array2::from_shape_simple_fn((m, n), || rng.sample::<f64, _>(StandardNormal));
    DesignMatrix::new(rows).expect("finite gaussian design")
}

/// Cavities from the marginal rule against explicit leave-one-out
/// reassembly of the precision.
pub fn check_cavities(seed: u64, instances: usize, n: usize, m: usize, tol: f64) -> CheckReport {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = EpConfig::default();
    let mut worst: f64 = 0.0;
    let mut failure = None;
    for _ in 0..instances {
        let x = gaussian_design(&mut rng, n, m);
        let a = Array1::from_shape_simple_fn(n + m, || rng.sample::<f64, _>(StandardNormal));
        let d = Array1::from_shape_simple_fn(n + m, || rng.gen_range(0.5..2.0));
        let site = SiteParams { a, d };
        let g = match assemble_weight_precision(&x, &site) {
            Ok(g) => g,
            Err(e) => {
                failure = Some(e.to_string());
                continue;
            }
        };
        let (cav, _) = cavity_from_marginal(&g.marginals, &site, &cfg);

        let xr = x.rows();
        let mut precision = xr
            .t()
            .dot(&Array2::from_diag(&site.d.slice(s![n..]).mapv(f64::recip)));
        precision = precision.dot(&xr);
        for k in 0..n {
            precision[[k, k]] += 1.0 / site.d[k];
        }
        let shift = g.shift.clone();
        for i in 0..n + m {
            let mut p = precision.clone();
            let mut b = shift.clone();
            // direction along which site i acts
            let dir: Array1<f64> = if i < n {
                let mut e = Array1::zeros(n);
                e[i] = 1.0;
                e
            } else {
                xr.row(i - n).to_owned()
            };
            for r in 0..n {
                for c in 0..n {
                    p[[r, c]] -= dir[r] * dir[c] / site.d[i];
                }
            }
            b.scaled_add(-site.a[i] / site.d[i], &dir);
            match Cholesky::factor(p.view()) {
                Ok(ch) => {
                    let pd = ch.solve(dir.view());
                    let var = dir.dot(&pd);
                    let mean = pd.dot(&b);
                    worst = worst
                        .max((var - cav.var[i]).abs())
                        .max((mean - cav.mean[i]).abs());
                }
                Err(e) => failure = Some(e.to_string()),
            }
        }
    }
    report(
        "cavity-equivalence",
        start,
        failure.is_none() && worst <= tol,
        format!(
            "{instances} instances N={n} M={m}, max abs deviation {worst:.2e}{}",
            failure
                .map(|f| format!(", failure: {f}"))
                .unwrap_or_default()
        ),
    )
}

/// A noiseless teacher–student instance with Bernoulli support.
fn teacher_instance(
    rng: &mut ChaCha8Rng,
    n: usize,
    m: usize,
    rho: f64,
) -> (Array2<f64>, Array1<f64>) {
    let patterns = Array2::from_shape_simple_fn((m, n), || rng.sample::<f64, _>(StandardNormal));
    let mut teacher = Array1::<f64>::zeros(n);
    while teacher.iter().all(|&v| v == 0.0) {
        for t in teacher.iter_mut() {
            *t = if rng.gen::<f64>() < rho {
                rng.sample(StandardNormal)
            } else {
                0.0
            };
        }
    }
    (patterns, teacher)
}

/// At a converged fixed point, tilted moments agree with the marginals of
/// the approximation. Sites whose tilted variance exceeds the cavity
/// variance cannot be matched by any Gaussian site (they sit at `d_max`);
/// their mismatch is reported separately.
pub fn check_fixed_point(
    seed: u64,
    instances: usize,
    n: usize,
    m: usize,
    cfg: &EpConfig,
) -> CheckReport {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let priors = Priors::new(
        SpikeSlabParams {
            rho: 0.25,
            lambda: 1.0,
        },
        LabelPrior::Theta,
    );
    let (mut worst, mut worst_clamped): (f64, f64) = (0.0, 0.0);
    let mut clamped_sites = 0;
    let mut unconverged = 0;
    let mut failure = None;
    for _ in 0..instances {
        let (patterns, teacher) = teacher_instance(&mut rng, n, m, 0.25);
        let labels = label(patterns.view(), teacher.view());
        let x = DesignMatrix::from_patterns(patterns.view(), &labels).expect("finite design");
        let r = match ep_run(&x, &priors, cfg) {
            Ok(r) => r,
            Err(e) => {
                failure = Some(e.to_string());
                continue;
            }
        };
        if !r.converged {
            unconverged += 1;
            continue;
        }
        let g = assemble_weight_precision(&x, &r.site).expect("converged sites factor");
        let (cav, _) = cavity_from_marginal(&g.marginals, &r.site, cfg);
        for i in 0..n + m {
            let t = priors
                .site(i, n)
                .moments(cav.get(i))
                .expect("finite cavity");
            let (mean, var) = (g.marginals.mean[i], g.marginals.var[i]);
            let second = var + mean * mean;
            let e = (t.mean - mean).abs().max((t.second - second).abs());
            if 1.0 / t.var - 1.0 / cav.var[i] < 1.0 / cfg.d_max {
                clamped_sites += 1;
                worst_clamped = worst_clamped.max(e);
            } else {
                worst = worst.max(e);
            }
        }
    }
    let bound = 10.0 * cfg.eps_stop;
    report(
        "fixed-point",
        start,
        failure.is_none() && unconverged == 0 && worst <= bound,
        format!(
            "{instances} instances N={n} M={m}, max mismatch {worst:.2e} (bound {bound:.1e}), {unconverged} unconverged, {clamped_sites} unmatchable sites (max mismatch {worst_clamped:.2e}){}",
            failure.map(|f| format!(", failure: {f}")).unwrap_or_default()
        ),
    )
}

/// Analytic hyperparameter gradients against central differences.
pub fn check_gradients(seed: u64, configs: usize, h: f64, rel: f64) -> CheckReport {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..configs {
        let k = rng.gen_range(1..=16);
        let mu: Vec<f64> = (0..k).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let sigma: Vec<f64> = (0..k)
            .map(|_| 10f64.powf(rng.gen_range(-2.0..2.0)))
            .collect();
        let rho = rng.gen_range(0.05..0.95);
        let lambda = 10f64.powf(rng.gen_range(-2.0..4.0));
        let eta = rng.gen_range(0.55..0.99);

        let fd_r = fd_gradient(|p| rho_objective(&mu, &sigma, p[0], lambda), &[rho], h)[0];
        let g_r = grad_rho(&mu, &sigma, rho, lambda);
        let fd_e = fd_gradient(|p| eta_objective(&mu, &sigma, p[0]), &[eta], h)[0];
        let g_e = grad_eta(&mu, &sigma, eta);
        // relative to the gradient, with a floor at the difference quotient's
        // own rounding level
        let floor_r = 1e-16 * rho_objective(&mu, &sigma, rho, lambda).abs() / h;
        let floor_e = 1e-16 * eta_objective(&mu, &sigma, eta).abs() / h;
        worst = worst
            .max(excess(g_r, fd_r, rel, floor_r.max(1e-300)))
            .max(excess(g_e, fd_e, rel, floor_e.max(1e-300)));
    }
    report(
        "gradients",
        start,
        worst <= 1.0,
        format!("{configs} cavity sets, h={h:e}, worst error/tolerance {worst:.2e}"),
    )
}

/// EP weight means against the importance-sampling posterior on tiny
/// instances, half of them with label noise `η = 0.9`.
pub fn check_small_posterior(
    seed: u64,
    instances: usize,
    n_samples: usize,
    slack: f64,
) -> CheckReport {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = EpConfig {
        damping: 0.5,
        eps_stop: 1e-9,
        max_iter: 20_000,
        ..EpConfig::default()
    };
    let mut worst: f64 = f64::NEG_INFINITY;
    let mut failure = None;
    for k in 0..instances {
        let n = rng.gen_range(2..=8);
        let m = rng.gen_range(2..=8);
        let noisy = k % 2 == 1;
        let (patterns, teacher) = teacher_instance(&mut rng, n, m, 0.25);
        let mut labels = label(patterns.view(), teacher.view());
        let prior_labels = if noisy {
            labels = flip_labels(&labels, 0.9, &mut rng).expect("valid eta").0;
            LabelPrior::Mixture(ThetaMixtureParams { eta: 0.9 })
        } else {
            LabelPrior::Theta
        };
        let priors = Priors::new(
            SpikeSlabParams {
                rho: 0.25,
                lambda: 1.0,
            },
            prior_labels,
        );
        let x = DesignMatrix::from_patterns(patterns.view(), &labels).expect("finite design");
        let ep = ep_run(&x, &priors, &cfg);
        let mc = mc_posterior(&x, &priors, n_samples, rng.gen());
        match (ep, mc) {
            (Ok(ep), Ok(mc)) => {
                for j in 0..n {
                    let gap =
                        (ep.weight_means()[j] - mc.mean[j]).abs() - (3.0 * mc.std_err[j] + slack);
                    worst = worst.max(gap);
                }
            }
            (Err(e), _) => failure = Some(e.to_string()),
            (_, Err(e)) => failure = Some(e.to_string()),
        }
    }
    report(
        "small-posterior",
        start,
        failure.is_none() && worst <= 0.0,
        format!(
            "{instances} instances N,M ≤ 8, worst |EP − MC| − (3·SE + {slack}) = {worst:.3}{}",
            failure
                .map(|f| format!(", failure: {f}"))
                .unwrap_or_default()
        ),
    )
}

/// Everything above at the default sizes.
pub fn run_all(seed: u64) -> Vec<CheckReport> {
    vec![
        check_moment_grid(&grid_quadrature(), 1e-8, 1e-10),
        check_cavities(seed, 50, 16, 32, 1e-10),
        check_fixed_point(seed, 20, 32, 64, &fixed_point_config()),
        check_gradients(seed, 100, 1e-6, 1e-6),
        check_small_posterior(seed, 20, 1_000_000, 0.05),
    ]
}

/// Quadrature accuracy for the moment grid, three orders tighter than the
/// comparison tolerance.
pub fn grid_quadrature() -> QuadratureSpec {
    QuadratureSpec {
        rel_tol: 1e-11,
        ..QuadratureSpec::default()
    }
}

/// Settings under which the fixed-point check is run.
pub fn fixed_point_config() -> EpConfig {
    EpConfig {
        damping: 0.9,
        eps_stop: 1e-6,
        max_iter: 50_000,
        ..EpConfig::default()
    }
}
