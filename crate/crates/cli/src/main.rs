//! `diluted-ep`: generate instances, train, evaluate, run experiment grids
//! and oracle suites.
//!
//! Exit codes: 0 success, 1 usage or I/O error, 2 numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use diluted_ep::datagen::{
    generate_instance, Instance, InstanceSpec, PatternEnsemble, RecurrentUpdate,
};
use diluted_ep::ep::{
    run_with, EpConfig, EpResult, LabelPrior, Learning, Priors, RunOptions, ZeroTemperature,
};
use diluted_ep::finite_temp::{ft_run, FiniteTempConfig};
use diluted_ep::free_energy::LearningRates;
use diluted_ep::harness::{evaluate, run_experiment, ExperimentConfig};
use diluted_ep::metrics::{curve_csv, roc_and_auc, sensitivity_curve, ScoreMode};
use diluted_ep::oracle::checks;
use diluted_ep::tilted::{SpikeSlabParams, ThetaMixtureParams};

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Numerical(_) => 2,
        }
    }
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn numerical(e: impl std::fmt::Display) -> CliError {
    CliError::Numerical(e.to_string())
}

#[derive(Debug, Parser)]
#[command(
    name = "diluted-ep",
    version,
    about = "Expectation propagation for sparse sign-label perceptrons"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Ensemble {
    Iid,
    Mvn,
    Recurrent,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Update {
    Sync,
    FullSweep,
    Hamming,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Score {
    AbsWeight,
    PNonzero,
}

impl From<Score> for ScoreMode {
    fn from(s: Score) -> Self {
        match s {
            Score::AbsWeight => ScoreMode::AbsWeight,
            Score::PNonzero => ScoreMode::PNonzero,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample a teacher, patterns and labels; write an instance file.
    Gen {
        #[arg(long, default_value_t = 128)]
        n: usize,
        #[arg(long, default_value_t = 2.0)]
        alpha: f64,
        #[arg(long, default_value_t = 0.25)]
        rho: f64,
        #[arg(long, default_value_t = 1.0)]
        slab_std: f64,
        #[arg(long, value_enum, default_value_t = Ensemble::Iid)]
        ensemble: Ensemble,
        /// Rank of the correlated part of the MVN covariance.
        #[arg(long, default_value_t = 1)]
        u: usize,
        #[arg(long, value_enum, default_value_t = Update::Sync)]
        update: Update,
        /// Hamming distance between consecutive states.
        #[arg(long, default_value_t = 10)]
        dh: usize,
        /// Fraction of labels left intact.
        #[arg(long, default_value_t = 1.0)]
        eta: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output path; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run EP on an instance file and write the result.
    Train {
        #[arg(long)]
        instance: PathBuf,
        #[arg(long)]
        eps_stop: Option<f64>,
        #[arg(long)]
        damping: Option<f64>,
        #[arg(long)]
        max_iter: Option<usize>,
        /// Initial variance of the example sites.
        #[arg(long)]
        init_example_var: Option<f64>,
        /// Student density; the instance's density when absent.
        #[arg(long)]
        rho: Option<f64>,
        /// Student slab precision; `1/slab_std²` when absent.
        #[arg(long)]
        lambda: Option<f64>,
        /// Student label reliability; the instance's `η` when absent.
        #[arg(long)]
        eta: Option<f64>,
        #[arg(long)]
        learn_rho: bool,
        #[arg(long)]
        learn_eta: bool,
        #[arg(long, default_value_t = diluted_ep::free_energy::DEFAULT_LR)]
        lr_rho: f64,
        #[arg(long, default_value_t = diluted_ep::free_energy::DEFAULT_LR)]
        lr_eta: f64,
        /// Use the finite-temperature engine at this inverse temperature.
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a result against its instance's teacher.
    Eval {
        #[arg(long)]
        instance: PathBuf,
        #[arg(long)]
        result: PathBuf,
        #[arg(long, value_enum, default_value_t = Score::AbsWeight)]
        score_mode: Score,
        /// Write the ROC curve as CSV.
        #[arg(long)]
        roc: Option<PathBuf>,
        /// Write the top-k sensitivity curve as CSV.
        #[arg(long)]
        sensitivity: Option<PathBuf>,
    },
    /// Run an experiment grid from a config file.
    Exp {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's root seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Commit id recorded in the summary.
        #[arg(long)]
        commit: Option<String>,
    },
    /// Run the oracle suites.
    OracleCheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

fn read(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| usage(format!("{}: {e}", p.display()))),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn load_instance(path: &Path) -> Result<Instance, CliError> {
    Instance::from_json(&read(path)?).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn commit_id() -> String {
    std::process::Command::new("git")
        .args(["rev-parse", "HEAD"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Command::Gen {
            n,
            alpha,
            rho,
            slab_std,
            ensemble,
            u,
            update,
            dh,
            eta,
            seed,
            out,
        } => {
            let ensemble = match ensemble {
                Ensemble::Iid => PatternEnsemble::Iid,
                Ensemble::Mvn => PatternEnsemble::Mvn { u },
                Ensemble::Recurrent => PatternEnsemble::Recurrent(match update {
                    Update::Sync => RecurrentUpdate::Sync,
                    Update::FullSweep => RecurrentUpdate::FullSweep,
                    Update::Hamming => RecurrentUpdate::Hamming { d_h: dh },
                }),
            };
            ensemble.validate(n).map_err(usage)?;
            let spec = InstanceSpec {
                n,
                alpha,
                rho,
                slab_std,
                ensemble,
                eta,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inst = generate_instance(&spec, seed, &mut rng).map_err(numerical)?;
            emit(out.as_deref(), &inst.to_json().map_err(usage)?)
        }
        Command::Train {
            instance,
            eps_stop,
            damping,
            max_iter,
            init_example_var,
            rho,
            lambda,
            eta,
            learn_rho,
            learn_eta,
            lr_rho,
            lr_eta,
            beta,
            out,
        } => {
            let inst = load_instance(&instance)?;
            let x = inst.design().map_err(usage)?;
            let noisy = inst.spec.eta < 1.0 || learn_eta;
            let mut cfg = if noisy {
                EpConfig::noisy()
            } else {
                EpConfig::noiseless()
            };
            cfg.eps_stop = eps_stop.unwrap_or(cfg.eps_stop);
            cfg.damping = damping.unwrap_or(cfg.damping);
            cfg.max_iter = max_iter.unwrap_or(cfg.max_iter);
            cfg.init_example_var = init_example_var.unwrap_or(cfg.init_example_var);
            cfg.validate().map_err(usage)?;

            let lambda = lambda.unwrap_or(1.0 / (inst.spec.slab_std * inst.spec.slab_std));
            let weights =
                SpikeSlabParams::new(rho.unwrap_or(inst.spec.rho), lambda).map_err(usage)?;
            let eta = eta.unwrap_or(inst.spec.eta);
            let labels = if eta >= 1.0 && !learn_eta {
                LabelPrior::Theta
            } else {
                LabelPrior::Mixture(ThetaMixtureParams::new(eta.min(1.0)).map_err(usage)?)
            };
            let priors = Priors::new(weights, labels);
            let learning = (learn_rho || learn_eta).then(|| {
                Learning::new(
                    learn_rho,
                    learn_eta,
                    LearningRates {
                        rho: lr_rho,
                        eta: lr_eta,
                    },
                )
            });

            let result: EpResult = match beta {
                Some(beta) => {
                    if learning.is_some() {
                        return Err(usage(
                            "hyperparameter learning is not available with --beta",
                        ));
                    }
                    ft_run(&x, &priors, &FiniteTempConfig { beta, base: cfg })
                }
                None => run_with(
                    &ZeroTemperature,
                    &x,
                    &priors,
                    &cfg,
                    RunOptions {
                        learning,
                        ..RunOptions::default()
                    },
                ),
            }
            .map_err(numerical)?;
            if !result.converged {
                eprintln!(
                    "warning: not converged after {} iterations (eps = {:e})",
                    result.iterations, result.eps_final
                );
            }
            let json = serde_json::to_string_pretty(&result).map_err(usage)?;
            emit(out.as_deref(), &json)
        }
        Command::Eval {
            instance,
            result,
            score_mode,
            roc,
            sensitivity,
        } => {
            let inst = load_instance(&instance)?;
            let r: EpResult = serde_json::from_str(&read(&result)?)
                .map_err(|e| usage(format!("{}: {e}", result.display())))?;
            if r.n != inst.teacher.len() {
                return Err(usage(format!(
                    "result has {} weights, instance teacher has {}",
                    r.n,
                    inst.teacher.len()
                )));
            }
            let e = evaluate(&r, inst.teacher.view());
            let mode = ScoreMode::from(score_mode);
            let meta = [
                ("instance", instance.display().to_string()),
                ("seed", inst.seed.to_string()),
                ("score_mode", format!("{mode:?}")),
            ];
            if let Some(path) = roc {
                let c = roc_and_auc(e.scores(mode), &e.truth).map_err(numerical)?;
                emit(Some(&path), &curve_csv(&meta, ("fpr", "tpr"), c.points))?;
            }
            if let Some(path) = sensitivity {
                let c = sensitivity_curve(e.scores(mode), &e.truth).map_err(numerical)?;
                emit(Some(&path), &curve_csv(&meta, ("k", "sensitivity"), c))?;
            }
            let summary = serde_json::json!({
                "converged": r.converged,
                "iterations": r.iterations,
                "mse_db": e.mse_db,
                "auc_abs": e.auc_abs,
                "auc_pnz": e.auc_pnz,
                "rho": r.priors.weights.rho,
                "eta": r.priors.labels.eta(),
            });
            emit(
                None,
                &serde_json::to_string_pretty(&summary).map_err(usage)?,
            )
        }
        Command::Exp {
            config,
            seed,
            out,
            commit,
        } => {
            let text = read(&config)?;
            let mut cfg = ExperimentConfig::parse(&text)
                .map_err(|e| usage(format!("{}: {e}", config.display())))?;
            if let Some(s) = seed {
                cfg.root_seed = s;
            }
            if out.is_some() {
                cfg.out_dir = out;
            }
            let commit = commit.unwrap_or_else(commit_id);
            let output = run_experiment(&cfg, &commit).map_err(usage)?;
            for a in &output.summary.alphas {
                eprintln!(
                    "alpha {}: {}/{} converged, {} failed",
                    a.alpha, a.converged, a.trials, a.failed
                );
            }
            if cfg.out_dir.is_none() {
                emit(
                    None,
                    &serde_json::to_string_pretty(&output.summary).map_err(usage)?,
                )?;
            }
            Ok(())
        }
        Command::OracleCheck { seed } => {
            let reports = checks::run_all(seed);
            for r in &reports {
                println!(
                    "{} {} ({:.1} s): {}",
                    if r.passed { "PASS" } else { "FAIL" },
                    r.name,
                    r.seconds,
                    r.detail
                );
            }
            let failed = reports.iter().filter(|r| !r.passed).count();
            if failed > 0 {
                return Err(numerical(format!("{failed} oracle check(s) failed")));
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
