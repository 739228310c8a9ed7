use std::cell::Cell;

use diluted_ep::datagen::{generate_instance, Instance, InstanceSpec, PatternEnsemble};
use diluted_ep::ep::{
    assemble_weight_precision, cavity_from_marginal, ep_iterate, ep_run, run_with, site_update,
    DesignMatrix, EpConfig, EpError, GaussianModel, LabelPrior, Marginals, Priors, RunOptions,
    SiteParams, ZeroTemperature,
};
use diluted_ep::linalg::Cholesky;
use diluted_ep::oracle::checks::check_cavities;
use diluted_ep::tilted::{CavityParams, MomentTriple, SpikeSlabParams};
use ndarray::{array, Array1, Array2, Axis};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn instance(n: usize, alpha: f64, seed: u64) -> Instance {
    let spec = InstanceSpec {
        n,
        alpha,
        rho: 0.25,
        slab_std: 1.0,
        ensemble: PatternEnsemble::Iid,
        eta: 1.0,
    };
    generate_instance(&spec, seed, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn priors(rho: f64) -> Priors {
    Priors::new(SpikeSlabParams::new(rho, 1.0).unwrap(), LabelPrior::Theta)
}

fn tight() -> EpConfig {
    EpConfig {
        damping: 0.5,
        eps_stop: 1e-10,
        max_iter: 20_000,
        ..EpConfig::default()
    }
}

#[test]
fn scalar_assembly() {
    let x = DesignMatrix::new(array![[1.0]]).unwrap();
    let g = assemble_weight_precision(&x, &SiteParams::init(2)).unwrap();
    assert!((g.sigma_w[[0, 0]] - 0.5).abs() < 1e-15);
    assert_eq!(g.w_bar[0], 0.0);
    for v in g.marginals.var.iter() {
        assert!((v - 0.5).abs() < 1e-15);
    }
}

#[test]
fn uninformative_sites_are_rank_deficient() {
    let x = DesignMatrix::new(array![[1.0, 2.0, 0.5]]).unwrap();
    let mut site = SiteParams::init(4);
    site.d.fill(1e300);
    site.d[3] = 1.0;
    assert!(matches!(
        assemble_weight_precision(&x, &site),
        Err(EpError::NotPositiveDefinite(_))
    ));
}

#[test]
fn marginal_variances_match_dense_inverse() {
    let inst = instance(16, 2.0, 5);
    let x = inst.design().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let site = SiteParams {
        a: Array1::from_shape_fn(48, |_| rand::Rng::gen_range(&mut rng, -1.0..1.0)),
        d: Array1::from_shape_fn(48, |_| rand::Rng::gen_range(&mut rng, 0.3..3.0)),
    };
    let g = assemble_weight_precision(&x, &site).unwrap();
    let xr = x.rows();
    let mut p = Array2::<f64>::zeros((16, 16));
    for (t, row) in xr.axis_iter(Axis(0)).enumerate() {
        for r in 0..16 {
            for c in 0..16 {
                p[[r, c]] += row[r] * row[c] / site.d[16 + t];
            }
        }
    }
    for k in 0..16 {
        p[[k, k]] += 1.0 / site.d[k];
    }
    let (inv, _) = Cholesky::factor(p.view()).unwrap().inverse();
    for k in 0..16 {
        assert!((inv[[k, k]] - g.marginals.var[k]).abs() < 1e-10);
    }
    // example-block means are X_σ·w̄ by construction
    let proj = xr.dot(&g.w_bar);
    for t in 0..32 {
        assert!((g.marginals.mean[16 + t] - proj[t]).abs() <= 1e-12 * proj[t].abs().max(1.0));
    }
}

#[test]
fn cavity_examples() {
    let cfg = EpConfig::default();
    let marg = Marginals {
        mean: array![0.3, 0.8],
        var: array![0.7, 0.5],
    };
    let site = SiteParams {
        a: array![4.0, 0.0],
        d: array![1e30, 1.0],
    };
    let (cav, clamps) = cavity_from_marginal(&marg, &site, &cfg);
    assert_eq!(clamps, 0);
    assert!((cav.var[0] - 0.7).abs() < 1e-12 && (cav.mean[0] - 0.3).abs() < 1e-12);
    // Σ_ii = d_i/2, a_i = 0
    assert!((cav.var[1] - 1.0).abs() < 1e-15);
    assert!((cav.mean[1] - 1.6).abs() < 1e-15);
}

#[test]
fn cavity_with_nonpositive_precision_is_clamped() {
    let cfg = EpConfig::default();
    let marg = Marginals {
        mean: array![0.3],
        var: array![2.0],
    };
    let site = SiteParams {
        a: array![0.0],
        d: array![1.0],
    };
    let (cav, clamps) = cavity_from_marginal(&marg, &site, &cfg);
    assert_eq!(clamps, 1);
    assert_eq!(cav.var[0], cfg.d_max);
}

#[test]
fn site_update_examples() {
    let cav = CavityParams::new(0.0, 1.0).unwrap();
    let undamped = EpConfig {
        damping: 0.0,
        ..EpConfig::default()
    };
    let t = MomentTriple {
        log_z: 0.0,
        mean: 0.2,
        second: 0.5 + 0.04,
        var: 0.5,
    };
    let (a, d, clamped) = site_update(cav, &t, &undamped, 0.0, 1.0);
    assert!(!clamped);
    assert!((d - 1.0).abs() < 1e-15 && (a - 0.4).abs() < 1e-15);

    // tilted equal to the cavity: no correction, clamped to d_max
    let same = MomentTriple {
        log_z: 0.0,
        mean: 0.0,
        second: 1.0,
        var: 1.0,
    };
    let (a, d, clamped) = site_update(cav, &same, &undamped, 0.0, 1.0);
    assert!(clamped);
    assert_eq!(d, undamped.d_max);
    assert!(a.abs() < 1e-300);

    // damping mixes natural parameters
    let damped = EpConfig {
        damping: 0.99,
        ..EpConfig::default()
    };
    let (old_a, old_d) = (0.7, 2.5);
    let (a, d, _) = site_update(cav, &t, &damped, old_a, old_d);
    let prec = 0.99 / old_d + 0.01 * 1.0;
    let lin = 0.99 * old_a / old_d + 0.01 * 0.4;
    assert!((1.0 / d - prec).abs() < 1e-15);
    assert!((a / d - lin).abs() < 1e-15);
}

#[test]
fn first_sweep_is_well_posed() {
    let inst = instance(12, 2.0, 1);
    let x = inst.design().unwrap();
    let sw = ep_iterate(
        &x,
        &priors(0.25),
        &EpConfig::default(),
        &SiteParams::init(36),
        None,
    )
    .unwrap();
    assert!(sw.eps > 0.0 && sw.eps.is_finite());
}

// Weights that collapse onto the spike sit at the variance floor, where
// their sites drift without moving any moment; a Gaussian weight prior and
// soft labels keep every site regular.
#[test]
fn fixed_point_is_stationary() {
    let inst = instance(8, 2.0, 3);
    let x = inst.design().unwrap();
    let p = Priors::new(
        SpikeSlabParams::new(1.0, 1.0).unwrap(),
        LabelPrior::Mixture(diluted_ep::tilted::ThetaMixtureParams::new(0.9).unwrap()),
    );
    let cfg = EpConfig {
        damping: 0.8,
        max_iter: 50_000,
        ..tight()
    };
    let r = ep_run(&x, &p, &cfg).unwrap();
    assert!(r.converged);
    let prev: Vec<MomentTriple> = ep_iterate(&x, &p, &cfg, &r.site, None).unwrap().tilted;
    let sw = ep_iterate(&x, &p, &cfg, &r.site, Some(&prev)).unwrap();
    assert!(sw.eps < cfg.eps_stop);
    for i in 0..r.site.len() {
        assert!((sw.site.a[i] - r.site.a[i]).abs() <= 1e-9 * r.site.a[i].abs().max(1.0));
        assert!((sw.site.d[i] - r.site.d[i]).abs() <= 1e-9 * r.site.d[i].abs().max(1.0));
    }
}

#[test]
fn converged_moments_match_marginals() {
    let inst = instance(8, 2.0, 11);
    let x = inst.design().unwrap();
    let p = priors(0.25);
    let cfg = EpConfig {
        damping: 0.9,
        eps_stop: 1e-6,
        max_iter: 50_000,
        ..EpConfig::default()
    };
    let r = ep_run(&x, &p, &cfg).unwrap();
    assert!(r.converged);
    let g = assemble_weight_precision(&x, &r.site).unwrap();
    let (cav, _) = cavity_from_marginal(&g.marginals, &r.site, &cfg);
    for i in 0..24 {
        let t = p.site(i, 8).moments(cav.get(i)).unwrap();
        if 1.0 / t.var - 1.0 / cav.var[i] < 1.0 / cfg.d_max {
            continue;
        }
        assert!(
            (t.mean - g.marginals.mean[i]).abs() < 10.0 * cfg.eps_stop,
            "site {i}"
        );
    }
}

#[test]
fn no_examples_gives_prior_means() {
    let x = DesignMatrix::new(Array2::zeros((0, 5))).unwrap();
    let r = ep_run(&x, &priors(0.25), &EpConfig::default()).unwrap();
    assert!(r.weight_means().iter().all(|&m| m == 0.0));
}

#[test]
fn single_constraint_with_gaussian_prior_is_exact() {
    let x = DesignMatrix::new(array![[1.0]]).unwrap();
    let r = ep_run(&x, &priors(1.0), &tight()).unwrap();
    assert!((r.weight_means()[0] - (2.0 / std::f64::consts::PI).sqrt()).abs() < 1e-8);
}

// Fixed point of a separate scalar EP implementation with numerical
// integration of both tilted distributions.
#[test]
fn scalar_spike_fixed_point() {
    let x = DesignMatrix::new(array![[1.0]]).unwrap();
    let r = ep_run(&x, &priors(0.5), &tight()).unwrap();
    assert!(r.converged);
    assert!((r.weight_means()[0] - 0.591_036_473_219).abs() < 1e-8);
    assert!((r.site.a[0] - -26.010_619_225).abs() < 1e-6);
    assert!((r.site.d[0] - 16.058_087_708).abs() < 1e-6);
}

struct Counting<'a>(&'a Cell<usize>);

impl GaussianModel for Counting<'_> {
    fn marginals(&self, x: &DesignMatrix, site: &SiteParams) -> Result<Marginals, EpError> {
        self.0.set(self.0.get() + 1);
        ZeroTemperature.marginals(x, site)
    }

    fn factor_dim(&self, x: &DesignMatrix) -> usize {
        x.n()
    }
}

#[test]
fn one_factorization_per_sweep() {
    let inst = instance(10, 1.5, 2);
    let x = inst.design().unwrap();
    let calls = Cell::new(0);
    let cfg = EpConfig {
        max_iter: 25,
        eps_stop: 1e-300,
        ..EpConfig::default()
    };
    let r = run_with(
        &Counting(&calls),
        &x,
        &priors(0.25),
        &cfg,
        RunOptions::default(),
    )
    .unwrap();
    assert_eq!(r.iterations, 25);
    assert_eq!(calls.get(), 25);
    assert_eq!(ZeroTemperature.factor_dim(&x), 10);
}

#[test]
fn iteration_cap_reports_not_converged() {
    let inst = instance(16, 2.0, 4);
    let x = inst.design().unwrap();
    let cfg = EpConfig {
        max_iter: 3,
        ..EpConfig::noiseless()
    };
    let r = ep_run(&x, &priors(0.25), &cfg).unwrap();
    assert!(!r.converged);
    assert_eq!(r.iterations, 3);
}

#[test]
fn design_and_config_validation() {
    assert!(DesignMatrix::new(Array2::zeros((2, 0))).is_err());
    assert!(DesignMatrix::new(array![[f64::NAN]]).is_err());
    assert!(DesignMatrix::new(array![[0.0, 0.0]]).is_err());
    assert!(DesignMatrix::from_patterns(array![[1.0, 2.0]].view(), &[1, -1]).is_err());
    for bad in [
        EpConfig {
            damping: 1.0,
            ..EpConfig::default()
        },
        EpConfig {
            eps_stop: 0.0,
            ..EpConfig::default()
        },
        EpConfig {
            max_iter: 0,
            ..EpConfig::default()
        },
        EpConfig {
            init_example_var: -1.0,
            ..EpConfig::default()
        },
    ] {
        assert!(bad.validate().is_err(), "{bad:?}");
    }
}

#[test]
fn labels_enter_the_design_as_row_signs() {
    let x = DesignMatrix::from_patterns(array![[1.0, 2.0], [3.0, -1.0]].view(), &[1, -1]).unwrap();
    assert_eq!(x.rows(), array![[1.0, 2.0], [-3.0, 1.0]]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn cavities_match_leave_one_out(seed in any::<u64>(), n in 1usize..=16, m in 0usize..=32) {
        let r = check_cavities(seed, 1, n, m.max(n), 1e-10);
        prop_assert!(r.passed, "{}", r.detail);
    }

    #[test]
    fn weight_permutation_permutes_means(seed in 0u64..1000, shift in 1usize..8) {
        let inst = instance(8, 1.5, seed);
        let x = inst.design().unwrap();
        let cfg = EpConfig { max_iter: 200, ..tight() };
        let p = priors(0.25);
        let a = ep_run(&x, &p, &cfg).unwrap();
        let perm: Vec<usize> = (0..8).map(|k| (k + shift) % 8).collect();
        let xp = DesignMatrix::new(x.rows().select(Axis(1), &perm)).unwrap();
        let b = ep_run(&xp, &p, &cfg).unwrap();
        for (k, &j) in perm.iter().enumerate() {
            let (u, v) = (b.tilted_mean[k], a.tilted_mean[j]);
            // the factorization pivots in column order, so rounding differs
            prop_assert!((u - v).abs() <= 1e-7 * u.abs().max(1.0), "{u} vs {v}");
        }
        prop_assert_eq!(a.iterations, b.iterations);
    }
}
