//! Batch experiments: configuration, per-trial seeding, parallel trials,
//! aggregation and persistence.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::ArrayView1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{generate_instance, InstanceSpec, PatternEnsemble, RecurrentUpdate};
use crate::ep::{
    run_with, EpConfig, EpResult, LabelPrior, Learning, Priors, RunOptions, ZeroTemperature,
};
use crate::free_energy::LearningRates;
use crate::metrics::{normalized_mse_db, p_nonzero, roc_and_auc, ScoreMode};
use crate::tilted::{SpikeSlabParams, ThetaMixtureParams};

/// Environment variable holding the worker count.
pub const WORKERS_ENV: &str = "DILUTED_EP_WORKERS";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Line { line: usize, msg: String },
    #[error("field {field}: {msg}")]
    Field { field: &'static str, msg: String },
    #[error("unknown preset {0:?}")]
    UnknownPreset(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("io on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("thread pool: {0}")]
    Pool(String),
}

/// Starting value of a learned hyperparameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Init {
    Fixed { value: f64 },
    Uniform { lo: f64, hi: f64 },
}

impl Init {
    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Init::Fixed { value } => value,
            Init::Uniform { lo, hi } => rng.gen_range(lo..hi),
        }
    }

    fn parse(s: &str) -> Result<Self, String> {
        if let Some(rest) = s.strip_prefix("uniform:") {
            let (lo, hi) = rest
                .split_once(':')
                .ok_or_else(|| format!("expected uniform:LO:HI, got {s:?}"))?;
            let lo = lo.trim().parse::<f64>().map_err(|e| e.to_string())?;
            let hi = hi.trim().parse::<f64>().map_err(|e| e.to_string())?;
            if !(lo < hi) {
                return Err(format!("empty interval {lo}..{hi}"));
            }
            Ok(Init::Uniform { lo, hi })
        } else {
            s.parse::<f64>()
                .map(|value| Init::Fixed { value })
                .map_err(|e| format!("{s:?}: {e}"))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub n: usize,
    /// Teacher density.
    pub rho: f64,
    pub slab_std: f64,
    /// Student slab precision; `None` links it to `1/slab_std²`.
    pub lambda: Option<f64>,
    /// Fraction of labels left intact.
    pub eta_true: f64,
    pub rho_learn: bool,
    pub eta_learn: bool,
    /// Student density when not learned; `None` uses the teacher's.
    pub rho_prior: Option<f64>,
    /// Student `η` when not learned; `None` uses `eta_true`.
    pub eta_prior: Option<f64>,
    pub rho_init: Init,
    pub eta_init: Init,
    pub alphas: Vec<f64>,
    pub ensemble: PatternEnsemble,
    pub n_trials: usize,
    pub ep: EpConfig,
    pub lr: LearningRates,
    /// Hyperparameter steps start once `ε_t` drops below this.
    pub learn_warmup_eps: Option<f64>,
    pub root_seed: u64,
    pub score_mode: ScoreMode,
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "custom".into(),
            n: 128,
            rho: 0.25,
            slab_std: 1.0,
            lambda: None,
            eta_true: 1.0,
            rho_learn: false,
            eta_learn: false,
            rho_prior: None,
            eta_prior: None,
            rho_init: Init::Uniform { lo: 0.05, hi: 0.95 },
            eta_init: Init::Uniform { lo: 0.5, hi: 1.0 },
            alphas: vec![0.5, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
            ensemble: PatternEnsemble::Iid,
            n_trials: 100,
            ep: EpConfig::noiseless(),
            lr: LearningRates::default(),
            learn_warmup_eps: None,
            root_seed: 0,
            score_mode: ScoreMode::AbsWeight,
            out_dir: None,
        }
    }
}

pub const PRESETS: [&str; 6] = [
    "iid-noiseless",
    "mvn-noiseless",
    "iid-noisy-95",
    "mvn-noisy-90",
    "recnet-sync",
    "recnet-hamming10",
];

impl ExperimentConfig {
    pub fn preset(name: &str) -> Result<Self, ConfigError> {
        let base = Self {
            name: name.to_string(),
            ..Self::default()
        };
        let noisy = |eta: f64, ensemble| Self {
            // slab precision 1e4 with a matching teacher scale
            slab_std: 1e-2,
            eta_true: eta,
            ensemble,
            alphas: vec![0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 4.0, 5.0, 6.0],
            ep: EpConfig::noisy(),
            ..base.clone()
        };
        let with_damping = |damping: f64, ensemble| Self {
            ensemble,
            ep: EpConfig {
                damping,
                ..EpConfig::noiseless()
            },
            ..base.clone()
        };
        Ok(match name {
            "iid-noiseless" => base.clone(),
            "mvn-noiseless" => with_damping(0.999, PatternEnsemble::Mvn { u: 1 }),
            "iid-noisy-95" => noisy(0.95, PatternEnsemble::Iid),
            "mvn-noisy-90" => noisy(0.9, PatternEnsemble::Mvn { u: 1 }),
            "recnet-sync" => with_damping(0.999, PatternEnsemble::Recurrent(RecurrentUpdate::Sync)),
            "recnet-hamming10" => with_damping(
                0.999,
                PatternEnsemble::Recurrent(RecurrentUpdate::Hamming { d_h: 10 }),
            ),
            other => return Err(ConfigError::UnknownPreset(other.to_string())),
        })
    }

    pub fn student_lambda(&self) -> f64 {
        self.lambda.unwrap_or(1.0 / (self.slab_std * self.slab_std))
    }

    /// Teacher and student use the same slab.
    pub fn is_linked(&self) -> bool {
        let linked = 1.0 / (self.slab_std * self.slab_std);
        ((self.student_lambda() - linked) / linked).abs() < 1e-12
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |field, msg: String| Err(ConfigError::Field { field, msg });
        if self.n == 0 {
            return bad("n", "must be ≥ 1".into());
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return bad("rho", format!("{} not in (0, 1]", self.rho));
        }
        if !(self.slab_std > 0.0) {
            return bad("slab_std", format!("{} must be > 0", self.slab_std));
        }
        if !(self.student_lambda() > 0.0) {
            return bad("lambda", "must be > 0".into());
        }
        if !(0.5..=1.0).contains(&self.eta_true) {
            return bad("eta_true", format!("{} not in [0.5, 1]", self.eta_true));
        }
        if self.alphas.is_empty() || self.alphas.iter().any(|&a| !(a > 0.0)) {
            return bad("alphas", "need at least one α, all positive".into());
        }
        if self.n_trials == 0 {
            return bad("n_trials", "must be ≥ 1".into());
        }
        if !(self.lr.rho > 0.0 && self.lr.eta > 0.0) {
            return bad("lr", "learning rates must be > 0".into());
        }
        self.ensemble
            .validate(self.n)
            .map_err(|e| ConfigError::Field {
                field: "ensemble",
                msg: e.to_string(),
            })?;
        self.ep.validate().map_err(|e| ConfigError::Field {
            field: "ep",
            msg: e.to_string(),
        })
    }

    /// Parse JSON (if the text starts with `{`) or flat `key = value` lines.
    /// A `preset` key, when present, must come first and seeds the defaults.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        if text.trim_start().starts_with('{') {
            let cfg: Self = serde_json::from_str(text)?;
            cfg.validate()?;
            return Ok(cfg);
        }
        let mut cfg = Self::default();
        let mut ensemble_kind: Option<(usize, String)> = None;
        let mut u = 1usize;
        let mut update: Option<(usize, String)> = None;
        let mut d_h = 10usize;
        let mut seen_other = false;
        for (k, raw) in text.lines().enumerate() {
            let line = k + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| ConfigError::Line {
                line,
                msg: format!("expected key = value, got {content:?}"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            let err = |msg: String| ConfigError::Line {
                line,
                msg: format!("{key}: {msg}"),
            };
            fn num<T: std::str::FromStr>(v: &str) -> Result<T, String>
            where
                T::Err: std::fmt::Display,
            {
                v.parse::<T>().map_err(|e| format!("{v:?}: {e}"))
            }
            fn flag(v: &str) -> Result<bool, String> {
                match v {
                    "true" | "yes" | "1" => Ok(true),
                    "false" | "no" | "0" => Ok(false),
                    _ => Err(format!("{v:?} is not a boolean")),
                }
            }
            let opt = |v: &str| -> Result<Option<f64>, String> {
                if v == "auto" {
                    Ok(None)
                } else {
                    num::<f64>(v).map(Some)
                }
            };
            match key {
                "preset" => {
                    if seen_other {
                        return Err(err("preset must be the first key".into()));
                    }
                    cfg = Self::preset(value)?;
                }
                "name" => cfg.name = value.to_string(),
                "n" => cfg.n = num(value).map_err(err)?,
                "rho" => cfg.rho = num(value).map_err(err)?,
                "slab_std" => cfg.slab_std = num(value).map_err(err)?,
                "lambda" => cfg.lambda = opt(value).map_err(err)?,
                "eta_true" => cfg.eta_true = num(value).map_err(err)?,
                "rho_learn" => cfg.rho_learn = flag(value).map_err(err)?,
                "eta_learn" => cfg.eta_learn = flag(value).map_err(err)?,
                "rho_prior" => cfg.rho_prior = opt(value).map_err(err)?,
                "eta_prior" => cfg.eta_prior = opt(value).map_err(err)?,
                "rho_init" => cfg.rho_init = Init::parse(value).map_err(err)?,
                "eta_init" => cfg.eta_init = Init::parse(value).map_err(err)?,
                "alphas" => {
                    cfg.alphas = value
                        .split(',')
                        .map(|s| num::<f64>(s.trim()))
                        .collect::<Result<_, _>>()
                        .map_err(err)?
                }
                "ensemble" => ensemble_kind = Some((line, value.to_string())),
                "u" => u = num(value).map_err(err)?,
                "update" => update = Some((line, value.to_string())),
                "d_h" => d_h = num(value).map_err(err)?,
                "n_trials" => cfg.n_trials = num(value).map_err(err)?,
                "damping" => cfg.ep.damping = num(value).map_err(err)?,
                "eps_stop" => cfg.ep.eps_stop = num(value).map_err(err)?,
                "max_iter" => cfg.ep.max_iter = num(value).map_err(err)?,
                "d_max" => cfg.ep.d_max = num(value).map_err(err)?,
                "var_floor" => cfg.ep.var_floor = num(value).map_err(err)?,
                "init_example_var" => cfg.ep.init_example_var = num(value).map_err(err)?,
                "lr_rho" => cfg.lr.rho = num(value).map_err(err)?,
                "lr_eta" => cfg.lr.eta = num(value).map_err(err)?,
                "learn_warmup_eps" => cfg.learn_warmup_eps = opt(value).map_err(err)?,
                "root_seed" | "seed" => cfg.root_seed = num(value).map_err(err)?,
                "score_mode" => {
                    cfg.score_mode = match value {
                        "abs_weight" => ScoreMode::AbsWeight,
                        "p_nonzero" => ScoreMode::PNonzero,
                        _ => return Err(err("expected abs_weight or p_nonzero".into())),
                    }
                }
                "out_dir" => cfg.out_dir = Some(PathBuf::from(value)),
                _ => {
                    return Err(ConfigError::Line {
                        line,
                        msg: format!("unknown key {key:?}"),
                    })
                }
            }
            seen_other = true;
        }
        let explicit_update = update.is_some();
        if let Some((line, kind)) = ensemble_kind {
            cfg.ensemble = match kind.as_str() {
                "iid" => PatternEnsemble::Iid,
                "mvn" => PatternEnsemble::Mvn { u },
                "recurrent" => PatternEnsemble::Recurrent(RecurrentUpdate::Sync),
                other => {
                    return Err(ConfigError::Line {
                        line,
                        msg: format!("ensemble: unknown kind {other:?} (iid, mvn, recurrent)"),
                    })
                }
            };
        } else if let PatternEnsemble::Mvn { .. } = cfg.ensemble {
            cfg.ensemble = PatternEnsemble::Mvn { u };
        }
        if let Some((line, up)) = update {
            let parsed = match up.as_str() {
                "sync" => RecurrentUpdate::Sync,
                "full_sweep" | "full-sweep" => RecurrentUpdate::FullSweep,
                "hamming" => RecurrentUpdate::Hamming { d_h },
                other => {
                    return Err(ConfigError::Line {
                        line,
                        msg: format!("update: unknown rule {other:?} (sync, full_sweep, hamming)"),
                    })
                }
            };
            match cfg.ensemble {
                PatternEnsemble::Recurrent(_) => cfg.ensemble = PatternEnsemble::Recurrent(parsed),
                _ => {
                    return Err(ConfigError::Line {
                        line,
                        msg: "update only applies to the recurrent ensemble".into(),
                    })
                }
            }
        } else if !explicit_update {
            if let PatternEnsemble::Recurrent(RecurrentUpdate::Hamming { .. }) = cfg.ensemble {
                cfg.ensemble = PatternEnsemble::Recurrent(RecurrentUpdate::Hamming { d_h });
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One row of the record file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub alpha: f64,
    pub trial: usize,
    pub seed: u64,
    pub converged: bool,
    pub iterations: usize,
    pub eps_final: f64,
    pub mse_db: f64,
    pub auc_abs: f64,
    pub auc_pnz: f64,
    pub rho_learned: f64,
    pub eta_learned: f64,
    /// Fraction of nonzero teacher weights actually drawn.
    pub teacher_density: f64,
    pub clamp_events: usize,
    /// Empty unless the trial failed.
    pub error: String,
    #[serde(skip)]
    pub wall_time: f64,
}

/// Mean and standard error `s/√n` of one quantity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub se: f64,
    pub count: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                se: f64::NAN,
                count: 0,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let se = if n > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, se, count: n }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaSummary {
    pub alpha: f64,
    pub trials: usize,
    pub converged: usize,
    pub failed: usize,
    pub convergence_fraction: f64,
    pub mean_wall_time: f64,
    /// Over converged trials only.
    pub converged_only: BTreeMap<String, Stat>,
    /// Over every trial that produced a number.
    pub all_trials: BTreeMap<String, Stat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub config: ExperimentConfig,
    pub bayes_optimal_slab: bool,
    pub commit: String,
    pub alphas: Vec<AlphaSummary>,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub records: Vec<ExperimentRecord>,
    pub summary: ExperimentSummary,
}

/// SplitMix64 finalizer, used to derive independent trial seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of trial `trial` at α index `alpha_index`; depends on nothing else.
pub fn trial_seed(root: u64, alpha_index: usize, trial: usize) -> u64 {
    mix(mix(mix(root) ^ alpha_index as u64) ^ trial as u64)
}

/// Generate, train and score a single trial.
pub fn run_trial(cfg: &ExperimentConfig, alpha: f64, trial: usize, seed: u64) -> ExperimentRecord {
    let start = Instant::now();
    let mut rec = ExperimentRecord {
        alpha,
        trial,
        seed,
        converged: false,
        iterations: 0,
        eps_final: f64::NAN,
        mse_db: f64::NAN,
        auc_abs: f64::NAN,
        auc_pnz: f64::NAN,
        rho_learned: f64::NAN,
        eta_learned: f64::NAN,
        teacher_density: f64::NAN,
        clamp_events: 0,
        error: String::new(),
        wall_time: 0.0,
    };
    match trial_inner(cfg, alpha, seed, &mut rec) {
        Ok(()) => {}
        Err(e) => rec.error = e,
    }
    rec.wall_time = start.elapsed().as_secs_f64();
    rec
}

fn trial_inner(
    cfg: &ExperimentConfig,
    alpha: f64,
    seed: u64,
    rec: &mut ExperimentRecord,
) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = InstanceSpec {
        n: cfg.n,
        alpha,
        rho: cfg.rho,
        slab_std: cfg.slab_std,
        ensemble: cfg.ensemble,
        eta: cfg.eta_true,
    };
    let inst = generate_instance(&spec, seed, &mut rng).map_err(|e| e.to_string())?;
    let x = inst.design().map_err(|e| e.to_string())?;
    rec.teacher_density =
        inst.teacher.iter().filter(|&&v| v != 0.0).count() as f64 / inst.teacher.len() as f64;

    // hyperparameter draws use a stream separate from the data
    let mut hyper_rng = ChaCha8Rng::seed_from_u64(mix(seed ^ 0x5EED));
    let rho0 = if cfg.rho_learn {
        cfg.rho_init.draw(&mut hyper_rng)
    } else {
        cfg.rho_prior.unwrap_or(cfg.rho)
    };
    let eta0 = if cfg.eta_learn {
        cfg.eta_init.draw(&mut hyper_rng)
    } else {
        cfg.eta_prior.unwrap_or(cfg.eta_true)
    };
    let weights = SpikeSlabParams::new(rho0, cfg.student_lambda()).map_err(|e| e.to_string())?;
    let labels = if eta0 >= 1.0 && !cfg.eta_learn {
        LabelPrior::Theta
    } else {
        LabelPrior::Mixture(ThetaMixtureParams::new(eta0.min(1.0)).map_err(|e| e.to_string())?)
    };
    let priors = Priors::new(weights, labels);
    let learning = (cfg.rho_learn || cfg.eta_learn).then_some(Learning {
        warmup_eps: cfg.learn_warmup_eps.unwrap_or(f64::INFINITY),
        ..Learning::new(cfg.rho_learn, cfg.eta_learn, cfg.lr)
    });
    let opts = RunOptions {
        learning,
        ..RunOptions::default()
    };
    let r = run_with(&ZeroTemperature, &x, &priors, &cfg.ep, opts).map_err(|e| e.to_string())?;
    score(&r, &inst.teacher, rec)
}

/// Reconstruction metrics of one EP result against its teacher.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub mse_db: f64,
    pub auc_abs: f64,
    pub auc_pnz: f64,
    pub abs_scores: Vec<f64>,
    pub pnz_scores: Vec<f64>,
    pub truth: Vec<bool>,
}

impl Evaluation {
    pub fn scores(&self, mode: ScoreMode) -> &[f64] {
        match mode {
            ScoreMode::AbsWeight => &self.abs_scores,
            ScoreMode::PNonzero => &self.pnz_scores,
        }
    }
}

/// NaN marks a metric that is undefined for this teacher.
pub fn evaluate(r: &EpResult, teacher: ArrayView1<'_, f64>) -> Evaluation {
    let w = r.weight_means();
    let truth: Vec<bool> = teacher.iter().map(|&v| v != 0.0).collect();
    let abs_scores: Vec<f64> = w.iter().map(|v| v.abs()).collect();
    let pnz_scores: Vec<f64> = (0..r.n)
        .map(|k| {
            p_nonzero(
                r.cavity.mean[k],
                r.cavity.var[k],
                r.priors.weights.rho,
                r.priors.weights.lambda,
            )
        })
        .collect();
    // a teacher with full support has no negatives; AUC is then undefined
    Evaluation {
        mse_db: normalized_mse_db(w, teacher).unwrap_or(f64::NAN),
        auc_abs: roc_and_auc(&abs_scores, &truth)
            .map(|c| c.auc)
            .unwrap_or(f64::NAN),
        auc_pnz: roc_and_auc(&pnz_scores, &truth)
            .map(|c| c.auc)
            .unwrap_or(f64::NAN),
        abs_scores,
        pnz_scores,
        truth,
    }
}

fn score(
    r: &EpResult,
    teacher: &ndarray::Array1<f64>,
    rec: &mut ExperimentRecord,
) -> Result<(), String> {
    rec.converged = r.converged;
    rec.iterations = r.iterations;
    rec.eps_final = r.eps_final;
    rec.clamp_events = r.clamp_events;
    rec.rho_learned = r.priors.weights.rho;
    rec.eta_learned = r.priors.labels.eta();
    let e = evaluate(r, teacher.view());
    rec.mse_db = e.mse_db;
    rec.auc_abs = e.auc_abs;
    rec.auc_pnz = e.auc_pnz;
    Ok(())
}

fn summarize(alpha: f64, recs: &[&ExperimentRecord]) -> AlphaSummary {
    let trials = recs.len();
    let converged = recs.iter().filter(|r| r.converged).count();
    let failed = recs.iter().filter(|r| !r.error.is_empty()).count();
    let fields: [(&str, fn(&ExperimentRecord) -> f64); 7] = [
        ("mse_db", |r| r.mse_db),
        ("auc_abs", |r| r.auc_abs),
        ("auc_pnz", |r| r.auc_pnz),
        ("rho_learned", |r| r.rho_learned),
        ("eta_learned", |r| r.eta_learned),
        ("iterations", |r| r.iterations as f64),
        ("teacher_density", |r| r.teacher_density),
    ];
    let collect = |only_conv: bool| {
        fields
            .iter()
            .map(|(name, get)| {
                let vals: Vec<f64> = recs
                    .iter()
                    .filter(|r| !only_conv || r.converged)
                    .map(|r| get(r))
                    .filter(|v| v.is_finite())
                    .collect();
                (name.to_string(), Stat::of(&vals))
            })
            .collect::<BTreeMap<_, _>>()
    };
    AlphaSummary {
        alpha,
        trials,
        converged,
        failed,
        convergence_fraction: converged as f64 / trials.max(1) as f64,
        mean_wall_time: recs.iter().map(|r| r.wall_time).sum::<f64>() / trials.max(1) as f64,
        converged_only: collect(true),
        all_trials: collect(false),
    }
}

fn worker_count() -> Option<usize> {
    std::env::var(WORKERS_ENV)
        .ok()?
        .parse()
        .ok()
        .filter(|&n: &usize| n > 0)
}

/// Run every (α, trial) pair. Trial failures are recorded, never fatal.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    commit: &str,
) -> Result<ExperimentOutput, HarnessError> {
    cfg.validate()?;
    let jobs: Vec<(usize, usize)> = (0..cfg.alphas.len())
        .flat_map(|a| (0..cfg.n_trials).map(move |t| (a, t)))
        .collect();
    let work = || -> Vec<ExperimentRecord> {
        jobs.par_iter()
            .map(|&(a, t)| run_trial(cfg, cfg.alphas[a], t, trial_seed(cfg.root_seed, a, t)))
            .collect()
    };
    let mut records = match worker_count() {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| HarnessError::Pool(e.to_string()))?
            .install(work),
        None => work(),
    };
    records.sort_by(|a, b| a.alpha.total_cmp(&b.alpha).then(a.seed.cmp(&b.seed)));

    let alphas = cfg
        .alphas
        .iter()
        .map(|&alpha| {
            let recs: Vec<&ExperimentRecord> =
                records.iter().filter(|r| r.alpha == alpha).collect();
            summarize(alpha, &recs)
        })
        .collect();
    let summary = ExperimentSummary {
        config: cfg.clone(),
        bayes_optimal_slab: cfg.is_linked(),
        commit: commit.to_string(),
        alphas,
    };
    if let Some(dir) = &cfg.out_dir {
        write_outputs(dir, &records, &summary)?;
    }
    Ok(ExperimentOutput { records, summary })
}

pub const RECORD_COLUMNS: &str = "alpha,trial,seed,converged,iterations,eps_final,mse_db,auc_abs,auc_pnz,rho_learned,eta_learned,teacher_density,clamp_events,error";

/// Records as CSV, fixed column order, no timing columns.
pub fn records_csv(records: &[ExperimentRecord]) -> String {
    let mut out = String::new();
    out.push_str(RECORD_COLUMNS);
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{:e},{},{},{},{},{},{},{},{}",
            r.alpha,
            r.trial,
            r.seed,
            r.converged,
            r.iterations,
            r.eps_final,
            r.mse_db,
            r.auc_abs,
            r.auc_pnz,
            r.rho_learned,
            r.eta_learned,
            r.teacher_density,
            r.clamp_events,
            r.error.replace([',', '\n'], ";")
        );
    }
    out
}

pub fn timings_csv(records: &[ExperimentRecord]) -> String {
    let mut out = String::from("alpha,trial,seed,wall_time\n");
    for r in records {
        let _ = writeln!(out, "{},{},{},{}", r.alpha, r.trial, r.seed, r.wall_time);
    }
    out
}

fn write_file(path: &Path, contents: &str) -> Result<(), HarnessError> {
    std::fs::write(path, contents).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// `records.csv`, `timings.csv` and `summary.json` under `dir`.
pub fn write_outputs(
    dir: &Path,
    records: &[ExperimentRecord],
    summary: &ExperimentSummary,
) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir).map_err(|source| HarnessError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    write_file(&dir.join("records.csv"), &records_csv(records))?;
    write_file(&dir.join("timings.csv"), &timings_csv(records))?;
    let json = serde_json::to_string_pretty(summary).expect("summary serializes");
    write_file(&dir.join("summary.json"), &json)
}
