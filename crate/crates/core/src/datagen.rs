//! Teacher weights, pattern ensembles, labels and label corruption.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ep::{DesignMatrix, EpError};
use crate::linalg::{Cholesky, NotPositiveDefinite};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DataError {
    #[error("invalid generator setting: {0}")]
    Invalid(String),
    #[error("hamming target {d_h} not reached within the budget of {budget} single-site updates")]
    StepBudget { d_h: usize, budget: usize },
    #[error("covariance factorization failed: {0}")]
    Covariance(#[from] NotPositiveDefinite),
    #[error(transparent)]
    Design(#[from] EpError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TeacherSpec {
    pub n: usize,
    pub rho: f64,
    pub slab_std: f64,
}

impl TeacherSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.n == 0 || !(self.rho > 0.0 && self.rho <= 1.0) || !(self.slab_std > 0.0) {
            return Err(DataError::Invalid(format!("teacher {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "update", rename_all = "snake_case")]
pub enum RecurrentUpdate {
    Sync,
    FullSweep,
    Hamming { d_h: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PatternEnsemble {
    Iid,
    Mvn { u: usize },
    Recurrent(RecurrentUpdate),
}

impl PatternEnsemble {
    pub fn validate(&self, n: usize) -> Result<(), DataError> {
        match *self {
            PatternEnsemble::Mvn { u } if u == 0 => Err(DataError::Invalid(
                "MVN rank parameter u must be ≥ 1".into(),
            )),
            PatternEnsemble::Recurrent(RecurrentUpdate::Hamming { d_h }) if d_h == 0 || d_h > n => {
                Err(DataError::Invalid(format!("d_H = {d_h} not in [1, {n}]")))
            }
            PatternEnsemble::Recurrent(_) if n < 2 => {
                Err(DataError::Invalid("recurrent networks need N ≥ 2".into()))
            }
            _ => Ok(()),
        }
    }
}

fn sign(v: f64) -> f64 {
    if v >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Sparse teacher; nonzero entries are `N(0, slab_std²)`. An all-zero
/// draw is rejected and resampled.
pub fn sample_teacher<R: Rng + ?Sized>(
    spec: &TeacherSpec,
    rng: &mut R,
) -> Result<Array1<f64>, DataError> {
    spec.validate()?;
    loop {
        let b: Array1<f64> = (0..spec.n)
            .map(|_| {
                if rng.gen::<f64>() < spec.rho {
                    spec.slab_std * rng.sample::<f64, _>(StandardNormal)
                } else {
                    0.0
                }
            })
            .collect();
        if b.iter().any(|&v| v != 0.0) {
            return Ok(b);
        }
    }
}

fn gaussian_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

/// `S = YᵀY + Δ`, `Y` a `u × N` standard normal matrix, `Δ` diagonal with
/// entries `|N(0, 1)|`.
pub fn mvn_covariance<R: Rng + ?Sized>(n: usize, u: usize, rng: &mut R) -> Array2<f64> {
    let y = gaussian_matrix(u, n, rng);
    let mut s = y.t().dot(&y);
    for k in 0..n {
        s[[k, k]] += rng.sample::<f64, _>(StandardNormal).abs();
    }
    s
}

/// Network of `N` perceptrons without self-loops; row `i` holds the
/// `N − 1` weights of unit `i` on the other units in index order.
pub fn sample_network<R: Rng + ?Sized>(
    spec: &TeacherSpec,
    rng: &mut R,
) -> Result<Array2<f64>, DataError> {
    if spec.n < 2 {
        return Err(DataError::Invalid("recurrent networks need N ≥ 2".into()));
    }
    let row_spec = TeacherSpec {
        n: spec.n - 1,
        ..*spec
    };
    let mut w = Array2::zeros((spec.n, spec.n - 1));
    for mut row in w.axis_iter_mut(Axis(0)) {
        row.assign(&sample_teacher(&row_spec, rng)?);
    }
    Ok(w)
}

/// `z_i = w_iᵀ x_{\i}`
fn local_field(w: ArrayView2<'_, f64>, x: &[f64], i: usize) -> f64 {
    let wi = w.row(i);
    let mut z = 0.0;
    for (k, &xv) in x.iter().enumerate() {
        if k < i {
            z += wi[k] * xv;
        } else if k > i {
            z += wi[k - 1] * xv;
        }
    }
    z
}

/// `x_i ← sign(z_i)` for one unit; returns whether it flipped.
fn glauber_site(w: ArrayView2<'_, f64>, x: &mut [f64], i: usize) -> bool {
    let new = sign(local_field(w, x, i));
    let flipped = new != x[i];
    x[i] = new;
    flipped
}

/// Synchronous sign dynamics from `x0`: returns `x⁰, x¹, …, x^{m−1}`.
pub fn recurrent_sync(w: ArrayView2<'_, f64>, x0: &[f64], m: usize) -> Array2<f64> {
    let n = x0.len();
    let mut out = Array2::zeros((m, n));
    let mut x = x0.to_vec();
    for t in 0..m {
        out.row_mut(t).assign(&ArrayView1::from(&x));
        x = (0..n).map(|i| sign(local_field(w, &x, i))).collect();
    }
    out
}

/// States stored after each full random-order sweep of `N` single-unit
/// updates, starting with `x⁰`.
pub fn recurrent_full_sweep<R: Rng + ?Sized>(
    w: ArrayView2<'_, f64>,
    x0: &[f64],
    m: usize,
    rng: &mut R,
) -> Array2<f64> {
    let n = x0.len();
    let mut out = Array2::zeros((m, n));
    let mut x = x0.to_vec();
    let mut order: Vec<usize> = (0..n).collect();
    for t in 0..m {
        out.row_mut(t).assign(&ArrayView1::from(&x));
        order.shuffle(rng);
        for &i in &order {
            glauber_site(w, &mut x, i);
        }
    }
    out
}

/// Step budget for the hamming variant, per stored state.
pub const HAMMING_STEPS_PER_STATE: usize = 10_000;

/// Single random-unit updates; a state is stored when its Hamming distance
/// to the last stored state equals `d_h`.
pub fn recurrent_hamming<R: Rng + ?Sized>(
    w: ArrayView2<'_, f64>,
    x0: &[f64],
    m: usize,
    d_h: usize,
    rng: &mut R,
) -> Result<Array2<f64>, DataError> {
    let n = x0.len();
    let budget = HAMMING_STEPS_PER_STATE * n.max(1) * m.max(1);
    let mut out = Array2::zeros((m, n));
    if m == 0 {
        return Ok(out);
    }
    let mut x = x0.to_vec();
    out.row_mut(0).assign(&ArrayView1::from(&x));
    let mut last = x.clone();
    let mut dist = 0usize;
    let mut stored = 1;
    let mut steps = 0;
    while stored < m {
        if steps >= budget {
            return Err(DataError::StepBudget { d_h, budget });
        }
        steps += 1;
        let i = rng.gen_range(0..n);
        if glauber_site(w, &mut x, i) {
            if x[i] == last[i] {
                dist -= 1;
            } else {
                dist += 1;
            }
            if dist == d_h {
                out.row_mut(stored).assign(&ArrayView1::from(&x));
                last.copy_from_slice(&x);
                dist = 0;
                stored += 1;
            }
        }
    }
    Ok(out)
}

/// `m × n` pattern matrix. Recurrent ensembles need the coupling matrix.
pub fn gen_patterns<R: Rng + ?Sized>(
    ens: &PatternEnsemble,
    n: usize,
    m: usize,
    rng: &mut R,
    network: Option<ArrayView2<'_, f64>>,
) -> Result<Array2<f64>, DataError> {
    ens.validate(n)?;
    match *ens {
        PatternEnsemble::Iid => Ok(gaussian_matrix(m, n, rng)),
        PatternEnsemble::Mvn { u } => {
            let s = mvn_covariance(n, u, rng);
            let l = Cholesky::factor(s.view())?;
            let z = gaussian_matrix(m, n, rng);
            Ok(z.dot(&l.l().t()))
        }
        PatternEnsemble::Recurrent(update) => {
            let w = network.ok_or_else(|| {
                DataError::Invalid("recurrent patterns need a coupling matrix".into())
            })?;
            if w.nrows() != n || w.ncols() + 1 != n {
                return Err(DataError::Invalid(format!(
                    "coupling matrix is {}×{}, expected {n}×{}",
                    w.nrows(),
                    w.ncols(),
                    n - 1
                )));
            }
            let x0: Vec<f64> = (0..n)
                .map(|_| sign(rng.sample::<f64, _>(StandardNormal)))
                .collect();
            match update {
                RecurrentUpdate::Sync => Ok(recurrent_sync(w, &x0, m)),
                RecurrentUpdate::FullSweep => Ok(recurrent_full_sweep(w, &x0, m, rng)),
                RecurrentUpdate::Hamming { d_h } => recurrent_hamming(w, &x0, m, d_h, rng),
            }
        }
    }
}

/// `σ_τ = sign(Bᵀx_τ)` with `sign(0) = 1`.
pub fn label(patterns: ArrayView2<'_, f64>, teacher: ArrayView1<'_, f64>) -> Vec<i8> {
    patterns
        .dot(&teacher)
        .iter()
        .map(|&v| if v >= 0.0 { 1 } else { -1 })
        .collect()
}

pub fn label_design(
    patterns: ArrayView2<'_, f64>,
    teacher: ArrayView1<'_, f64>,
) -> Result<(Vec<i8>, DesignMatrix), DataError> {
    let s = label(patterns, teacher);
    let x = DesignMatrix::from_patterns(patterns, &s)?;
    Ok((s, x))
}

/// `K = round((1−η)·M)`
pub fn flip_count(eta: f64, m: usize) -> usize {
    (((1.0 - eta) * m as f64).round() as usize).min(m)
}

/// Negate exactly `round((1−η)M)` labels chosen uniformly without
/// replacement. Returns the corrupted labels and the sorted flipped indices.
pub fn flip_labels<R: Rng + ?Sized>(
    labels: &[i8],
    eta: f64,
    rng: &mut R,
) -> Result<(Vec<i8>, Vec<usize>), DataError> {
    if !(0.5..=1.0).contains(&eta) {
        return Err(DataError::Invalid(format!("eta = {eta} not in [0.5, 1]")));
    }
    let m = labels.len();
    let k = flip_count(eta, m);
    let mut idx = index::sample(rng, m, k).into_vec();
    idx.sort_unstable();
    let mut out = labels.to_vec();
    for &i in &idx {
        out[i] = -out[i];
    }
    Ok((out, idx))
}

/// Everything needed to rebuild one training problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceSpec {
    pub n: usize,
    pub alpha: f64,
    pub rho: f64,
    pub slab_std: f64,
    pub ensemble: PatternEnsemble,
    /// Label reliability; 1 means no corruption.
    pub eta: f64,
}

impl InstanceSpec {
    /// Student dimension: `N` for feed-forward ensembles, `N − 1` for a
    /// unit of a recurrent network.
    pub fn student_dim(&self) -> usize {
        match self.ensemble {
            PatternEnsemble::Recurrent(_) => self.n.saturating_sub(1),
            _ => self.n,
        }
    }

    pub fn m(&self) -> usize {
        (self.alpha * self.student_dim() as f64).round() as usize
    }
}

/// Self-describing training problem, stored as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub spec: InstanceSpec,
    pub seed: u64,
    pub teacher: Array1<f64>,
    /// `M × N_student`
    pub patterns: Array2<f64>,
    /// Labels seen by the student (after corruption).
    pub labels: Vec<i8>,
    pub flipped: Vec<usize>,
}

impl Instance {
    pub fn design(&self) -> Result<DesignMatrix, EpError> {
        DesignMatrix::from_patterns(self.patterns.view(), &self.labels)
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }

    pub fn from_json(s: &str) -> serde_json::Result<Self> {
        serde_json::from_str(s)
    }
}

/// Drop column `i` of a state matrix.
fn without_column(states: &Array2<f64>, i: usize) -> Array2<f64> {
    let keep: Vec<usize> = (0..states.ncols()).filter(|&k| k != i).collect();
    states.select(Axis(1), &keep)
}

/// Generate one instance. For recurrent ensembles the student is unit 0
/// of a freshly sampled network and its patterns are the other units.
pub fn generate_instance<R: Rng + ?Sized>(
    spec: &InstanceSpec,
    seed: u64,
    rng: &mut R,
) -> Result<Instance, DataError> {
    if !(spec.alpha >= 0.0 && spec.alpha.is_finite()) {
        return Err(DataError::Invalid(format!("alpha = {}", spec.alpha)));
    }
    let m = spec.m();
    let tspec = TeacherSpec {
        n: spec.n,
        rho: spec.rho,
        slab_std: spec.slab_std,
    };
    let (teacher, patterns) = match spec.ensemble {
        PatternEnsemble::Recurrent(_) => {
            let w = sample_network(&tspec, rng)?;
            let states = gen_patterns(&spec.ensemble, spec.n, m, rng, Some(w.view()))?;
            (w.row(0).to_owned(), without_column(&states, 0))
        }
        _ => {
            let b = sample_teacher(&tspec, rng)?;
            let p = gen_patterns(&spec.ensemble, spec.n, m, rng, None)?;
            (b, p)
        }
    };
    let clean = label(patterns.view(), teacher.view());
    let (labels, flipped) = if spec.eta < 1.0 {
        flip_labels(&clean, spec.eta, rng)?
    } else {
        (clean, Vec::new())
    };
    Ok(Instance {
        spec: spec.clone(),
        seed,
        teacher,
        patterns,
        labels,
        flipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sync_period_four_cycle() {
        // unit 1 copies unit 2, unit 2 copies −unit 1
        let w = array![[1.0], [-1.0]];
        let s = recurrent_sync(w.view(), &[1.0, 1.0], 5);
        let expect = array![
            [1.0, 1.0],
            [1.0, -1.0],
            [-1.0, -1.0],
            [-1.0, 1.0],
            [1.0, 1.0]
        ];
        assert_eq!(s, expect);
    }

    #[test]
    fn flip_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let l = vec![1i8; 100];
        let (f, idx) = flip_labels(&l, 0.95, &mut rng).unwrap();
        assert_eq!(idx.len(), 5);
        assert_eq!(f.iter().filter(|&&v| v < 0).count(), 5);
        let (f, _) = flip_labels(&l[..10], 0.5, &mut rng).unwrap();
        assert_eq!(f.iter().filter(|&&v| v < 0).count(), 5);
        let (f, _) = flip_labels(&l, 1.0, &mut rng).unwrap();
        assert_eq!(f, l);
    }

    #[test]
    fn label_sign_convention() {
        let p = array![[2.0, 5.0], [0.0, 1.0], [-1.0, 0.0]];
        let b = array![1.0, 0.0];
        assert_eq!(label(p.view(), b.view()), vec![1, 1, -1]);
    }

    #[test]
    fn mvn_rank_one_part() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let y = gaussian_matrix(1, 4, &mut rng);
        let s = y.t().dot(&y);
        // every 2×2 minor of a rank-one matrix vanishes
        let minor = s[[0, 0]] * s[[1, 1]] - s[[0, 1]] * s[[1, 0]];
        assert!(minor.abs() < 1e-12);
    }

    #[test]
    fn ensemble_validation() {
        assert!(PatternEnsemble::Mvn { u: 0 }.validate(4).is_err());
        assert!(
            PatternEnsemble::Recurrent(RecurrentUpdate::Hamming { d_h: 5 })
                .validate(4)
                .is_err()
        );
        assert!(PatternEnsemble::Iid.validate(4).is_ok());
    }
}
