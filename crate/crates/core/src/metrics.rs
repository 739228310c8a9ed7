//! Reconstruction quality: normalized MSE, support scores, ROC/AUC and
//! top-k sensitivity.

use std::fmt::Write as _;

use ndarray::ArrayView1;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Value reported for an exact reconstruction.
pub const MSE_DB_FLOOR: f64 = -320.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricError {
    #[error("zero-norm {0} vector")]
    ZeroNorm(&'static str),
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("ranking needs at least one positive and one negative (got {positives} of {total})")]
    DegenerateTruth { positives: usize, total: usize },
}

/// `10·log₁₀((1/N)·|w/|w| − B/|B||²)`, floored at [`MSE_DB_FLOOR`].
pub fn normalized_mse_db(
    w: ArrayView1<'_, f64>,
    b: ArrayView1<'_, f64>,
) -> Result<f64, MetricError> {
    if w.len() != b.len() {
        return Err(MetricError::Length(w.len(), b.len()));
    }
    let nw = w.dot(&w).sqrt();
    let nb = b.dot(&b).sqrt();
    if !(nw > 0.0) {
        return Err(MetricError::ZeroNorm("estimate"));
    }
    if !(nb > 0.0) {
        return Err(MetricError::ZeroNorm("teacher"));
    }
    let mse = w
        .iter()
        .zip(b.iter())
        .map(|(x, y)| {
            let d = x / nw - y / nb;
            d * d
        })
        .sum::<f64>()
        / w.len() as f64;
    if mse == 0.0 {
        return Ok(MSE_DB_FLOOR);
    }
    Ok((10.0 * mse.log10()).max(MSE_DB_FLOOR))
}

/// Posterior probability that a weight sits in the slab, from its cavity.
pub fn p_nonzero(mu: f64, sigma: f64, rho: f64, lambda: f64) -> f64 {
    if rho >= 1.0 {
        return 1.0;
    }
    let ls = lambda * sigma;
    // log of (1/ρ − 1)·√((1+λΣ)/(λΣ))·exp(−μ²/(2Σ(1+λΣ)))
    let log_odds = ((1.0 - rho) / rho).ln() + 0.5 * ((1.0 + ls) / ls).ln()
        - mu * mu / (2.0 * sigma * (1.0 + ls));
    if log_odds > 0.0 {
        let e = (-log_odds).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + log_odds.exp())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    AbsWeight,
    PNonzero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// `(false-positive rate, true-positive rate)` from `(0,0)` to `(1,1)`.
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

fn counts(truth: &[bool], len: usize) -> Result<(usize, usize), MetricError> {
    if truth.len() != len {
        return Err(MetricError::Length(len, truth.len()));
    }
    let pos = truth.iter().filter(|&&t| t).count();
    if pos == 0 || pos == truth.len() {
        return Err(MetricError::DegenerateTruth {
            positives: pos,
            total: truth.len(),
        });
    }
    Ok((pos, truth.len() - pos))
}

/// Descending by score, stable in index.
fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// Threshold sweep with one vertex per distinct score; AUC by trapezoids.
pub fn roc_and_auc(scores: &[f64], truth: &[bool]) -> Result<RocCurve, MetricError> {
    let (pos, neg) = counts(truth, scores.len())?;
    let order = ranking(scores);
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc = 0.0;
    let mut k = 0;
    while k < order.len() {
        let s = scores[order[k]];
        while k < order.len() && scores[order[k]] == s {
            if truth[order[k]] {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        let (x0, y0) = *points.last().unwrap();
        let p = (fp as f64 / neg as f64, tp as f64 / pos as f64);
        auc += (p.0 - x0) * (p.1 + y0) * 0.5;
        points.push(p);
    }
    Ok(RocCurve { points, auc })
}

/// `(k, fraction of true nonzeros found among the k top-scored weights)`
/// for `k = 1..N`.
pub fn sensitivity_curve(scores: &[f64], truth: &[bool]) -> Result<Vec<(usize, f64)>, MetricError> {
    let (pos, _) = counts(truth, scores.len())?;
    let mut found = 0;
    Ok(ranking(scores)
        .into_iter()
        .enumerate()
        .map(|(k, i)| {
            found += truth[i] as usize;
            (k + 1, found as f64 / pos as f64)
        })
        .collect())
}

/// CSV with `# key: value` header comments.
pub fn curve_csv<T: std::fmt::Display, U: std::fmt::Display>(
    meta: &[(&str, String)],
    columns: (&str, &str),
    rows: impl IntoIterator<Item = (T, U)>,
) -> String {
    let mut out = String::new();
    for (k, v) in meta {
        let _ = writeln!(out, "# {k}: {v}");
    }
    let _ = writeln!(out, "{},{}", columns.0, columns.1);
    for (a, b) in rows {
        let _ = writeln!(out, "{a},{b}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};

    #[test]
    fn mse_cases() {
        let b = array![1.0, -2.0, 0.0];
        assert_eq!(normalized_mse_db(b.view(), b.view()).unwrap(), MSE_DB_FLOOR);
        let n = 128;
        let mut w = Array1::zeros(n);
        let mut t = Array1::zeros(n);
        w[0] = 3.0;
        t[1] = -0.5;
        let db = normalized_mse_db(w.view(), t.view()).unwrap();
        assert!((db - 10.0 * (2.0f64 / 128.0).log10()).abs() < 1e-12);
        assert!((db + 18.0618).abs() < 1e-3);
        assert!(normalized_mse_db(Array1::zeros(3).view(), b.view()).is_err());
    }

    #[test]
    fn mse_of_point_one_is_minus_twenty() {
        // N = 2: w̃ = (1, 0), B̃ = (cos θ, sin θ) with |w̃ − B̃|² = 0.02
        let c: f64 = 1.0 - 0.01;
        let b = array![c, (1.0 - c * c).sqrt()];
        let db = normalized_mse_db(array![1.0, 0.0].view(), b.view()).unwrap();
        assert!((db + 20.0).abs() < 1e-10);
    }

    #[test]
    fn p_nonzero_cases() {
        assert_eq!(p_nonzero(0.3, 1.0, 1.0, 1.0), 1.0);
        let p = p_nonzero(0.0, 1.0, 0.5, 1.0);
        assert!((p - 1.0 / (1.0 + 2f64.sqrt())).abs() < 1e-15);
        assert!(p_nonzero(1e3, 1e-3, 0.01, 1.0) > 1.0 - 1e-12);
    }

    #[test]
    fn roc_cases() {
        let truth = [true, false, true, false, false];
        let perfect = [1.0, 0.0, 1.0, 0.0, 0.0];
        assert_eq!(roc_and_auc(&perfect, &truth).unwrap().auc, 1.0);
        let flat = roc_and_auc(&[0.3; 5], &truth).unwrap();
        assert_eq!(flat.auc, 0.5);
        assert_eq!(flat.points, vec![(0.0, 0.0), (1.0, 1.0)]);
        assert!(roc_and_auc(&[1.0, 2.0], &[true, true]).is_err());
    }

    #[test]
    fn sensitivity_cases() {
        let truth = [false, true, false, true];
        let c = sensitivity_curve(&[0.1, 0.9, 0.2, 0.8], &truth).unwrap();
        assert_eq!(c[1], (2, 1.0));
        assert_eq!(c.last().unwrap().1, 1.0);
    }

    #[test]
    fn csv_layout() {
        let s = curve_csv(
            &[("seed", "7".into())],
            ("fpr", "tpr"),
            vec![(0.0, 0.0), (1.0, 1.0)],
        );
        assert_eq!(s, "# seed: 7\nfpr,tpr\n0,0\n1,1\n");
    }
}
