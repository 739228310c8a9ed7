use diluted_ep::datagen::PatternEnsemble;
use diluted_ep::harness::{
    records_csv, run_experiment, trial_seed, ConfigError, ExperimentConfig, ExperimentSummary,
    Init, RECORD_COLUMNS, WORKERS_ENV,
};

fn small(extra: &str) -> ExperimentConfig {
    ExperimentConfig::parse(&format!(
        "n = 16\nalphas = 1, 3\nn_trials = 3\ndamping = 0.9\n{extra}"
    ))
    .unwrap()
}

#[test]
fn parse_errors_carry_line_numbers() {
    let e = ExperimentConfig::parse("n = 16\n\n# fine\nensemble = torus\n").unwrap_err();
    assert!(e.to_string().starts_with("line 4"), "{e}");
    let e = ExperimentConfig::parse("n = 16\nthis line has no equals sign\n").unwrap_err();
    assert!(matches!(e, ConfigError::Line { line: 2, .. }), "{e}");
    let e = ExperimentConfig::parse("ensemble = recurrent\nupdate = sideways\n").unwrap_err();
    assert!(e.to_string().starts_with("line 2"), "{e}");
    let e = ExperimentConfig::parse("rho_init = uniform:0.9:0.1\n").unwrap_err();
    assert!(e.to_string().starts_with("line 1"), "{e}");
    // values that parse but make no sense are reported by field
    let e = ExperimentConfig::parse("eta_true = 0.3\n").unwrap_err();
    assert!(
        matches!(
            e,
            ConfigError::Field {
                field: "eta_true",
                ..
            }
        ),
        "{e}"
    );
    assert!(matches!(
        ExperimentConfig::parse("preset = unheard-of\n"),
        Err(ConfigError::UnknownPreset(_))
    ));
}

#[test]
fn json_and_flat_forms_agree() {
    let flat = small("rho_learn = true\nrho_init = 0.4\nensemble = mvn\nu = 3\n");
    assert_eq!(flat.rho_init, Init::Fixed { value: 0.4 });
    assert_eq!(flat.ensemble, PatternEnsemble::Mvn { u: 3 });
    let json = serde_json::to_string(&flat).unwrap();
    assert_eq!(ExperimentConfig::parse(&json).unwrap(), flat);
}

#[test]
fn experiments_are_reproducible_and_independent_of_workers() {
    let cfg = small("");
    std::env::set_var(WORKERS_ENV, "1");
    let a = run_experiment(&cfg, "x").unwrap();
    std::env::set_var(WORKERS_ENV, "3");
    let b = run_experiment(&cfg, "x").unwrap();
    std::env::remove_var(WORKERS_ENV);
    assert_eq!(records_csv(&a.records), records_csv(&b.records));
    assert_eq!(a.records.len(), 6);
    for r in &a.records {
        let ai = cfg.alphas.iter().position(|&v| v == r.alpha).unwrap();
        assert_eq!(r.seed, trial_seed(cfg.root_seed, ai, r.trial));
    }
    // a different root seed gives different data
    let c = run_experiment(
        &ExperimentConfig {
            root_seed: 1,
            ..cfg
        },
        "x",
    )
    .unwrap();
    assert_ne!(records_csv(&a.records), records_csv(&c.records));
}

#[test]
fn summaries_average_converged_trials_separately() {
    // a tight iteration cap leaves some trials unconverged
    let cfg = small("max_iter = 80\nn_trials = 6\n");
    let out = run_experiment(&cfg, "x").unwrap();
    let mut saw_mixed = false;
    for s in &out.summary.alphas {
        let recs: Vec<_> = out.records.iter().filter(|r| r.alpha == s.alpha).collect();
        let conv: Vec<f64> = recs
            .iter()
            .filter(|r| r.converged)
            .map(|r| r.mse_db)
            .collect();
        let all: Vec<f64> = recs
            .iter()
            .map(|r| r.mse_db)
            .filter(|v| v.is_finite())
            .collect();
        assert_eq!(s.converged, conv.len());
        assert_eq!(s.trials, recs.len());
        assert_eq!(
            s.convergence_fraction,
            conv.len() as f64 / recs.len() as f64
        );
        assert_eq!(s.converged_only["mse_db"].count, conv.len());
        assert_eq!(s.all_trials["mse_db"].count, all.len());
        if !conv.is_empty() {
            let mean = conv.iter().sum::<f64>() / conv.len() as f64;
            assert!((s.converged_only["mse_db"].mean - mean).abs() < 1e-12);
        }
        saw_mixed |= !conv.is_empty() && conv.len() < recs.len();
    }
    assert!(saw_mixed, "no α had both converged and unconverged trials");
}

#[test]
fn bayes_optimal_flag_follows_the_slab_link() {
    let linked = run_experiment(&small("n_trials = 1\nalphas = 2\n"), "c").unwrap();
    assert!(linked.summary.bayes_optimal_slab);
    let mismatched = run_experiment(&small("n_trials = 1\nalphas = 2\nlambda = 3\n"), "c").unwrap();
    assert!(!mismatched.summary.bayes_optimal_slab);
    let explicit = small("lambda = 1\n");
    assert!(explicit.is_linked());
}

#[test]
fn outputs_are_written_and_readable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        out_dir: Some(dir.path().join("run")),
        ..small("n_trials = 2\n")
    };
    let out = run_experiment(&cfg, "abc123").unwrap();
    let run = dir.path().join("run");
    let records = std::fs::read_to_string(run.join("records.csv")).unwrap();
    assert_eq!(records.lines().next().unwrap(), RECORD_COLUMNS);
    assert_eq!(records, records_csv(&out.records));
    assert_eq!(records.lines().count(), 1 + out.records.len());
    let timings = std::fs::read_to_string(run.join("timings.csv")).unwrap();
    assert!(timings.starts_with("alpha,trial,seed,wall_time"));
    let summary: ExperimentSummary =
        serde_json::from_str(&std::fs::read_to_string(run.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary.commit, "abc123");
    assert_eq!(summary.config, cfg);
}

#[test]
fn learned_density_tracks_the_teacher() {
    let cfg = ExperimentConfig::parse(
        "n = 32\nalphas = 4\nn_trials = 6\ndamping = 0.99\ninit_example_var = 100\n\
         rho_learn = true\nrho_init = uniform:0.05:0.95\nmax_iter = 20000\n",
    )
    .unwrap();
    let out = run_experiment(&cfg, "x").unwrap();
    let conv: Vec<_> = out.records.iter().filter(|r| r.converged).collect();
    assert!(conv.len() >= 4, "{}", records_csv(&out.records));
    for r in conv {
        assert!(
            (r.rho_learned - r.teacher_density).abs() < 0.15,
            "learned {} vs drawn {}",
            r.rho_learned,
            r.teacher_density
        );
    }
}
