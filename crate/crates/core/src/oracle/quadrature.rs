//! Adaptive Gauss–Kronrod (7/15) quadrature of tilted-distribution moments.
//!
//! Each continuous piece of `ψ(h)·N(h; μ, Σ)` is treated as a black-box
//! log-concave integrand: its mode is located by golden-section search, the
//! support window is grown outward until the integrand has dropped by
//! `e^-75`, and the moments of `h - mode` are integrated with global
//! bisection refinement. Point masses (the spike) are added analytically.

use serde::{Deserialize, Serialize};

use super::OracleError;
use crate::special::gauss_log_pdf;
use crate::tilted::{CavityParams, MomentTriple, SitePrior};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadratureSpec {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_subdivisions: usize,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        Self {
            abs_tol: 1e-300,
            rel_tol: 1e-13,
            max_subdivisions: 2000,
        }
    }
}

impl QuadratureSpec {
    fn validate(&self) -> Result<(), OracleError> {
        if self.abs_tol > 0.0 && self.rel_tol > 0.0 && self.max_subdivisions > 0 {
            Ok(())
        } else {
            Err(OracleError::InvalidSpec(format!("{self:?}")))
        }
    }
}

/// Moments with the quadrature's own error estimates on mean and variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadMoments {
    pub moments: MomentTriple,
    pub mean_err: f64,
    pub var_err: f64,
}

const DROP: f64 = 75.0;

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

#[derive(Debug, Clone, Copy)]
struct Panel {
    a: f64,
    b: f64,
    val: [f64; 3],
    err: [f64; 3],
}

fn gk15(f: &impl Fn(f64) -> [f64; 3], a: f64, b: f64) -> Panel {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let mut k = [0.0; 3];
    let mut g = [0.0; 3];
    let fc = f(c);
    for j in 0..3 {
        k[j] = WGK[7] * fc[j];
        g[j] = WG[3] * fc[j];
    }
    for i in 0..7 {
        let dx = h * XGK[i];
        let f1 = f(c - dx);
        let f2 = f(c + dx);
        for j in 0..3 {
            k[j] += WGK[i] * (f1[j] + f2[j]);
            if i % 2 == 1 {
                g[j] += WG[i / 2] * (f1[j] + f2[j]);
            }
        }
    }
    let mut val = [0.0; 3];
    let mut err = [0.0; 3];
    for j in 0..3 {
        val[j] = k[j] * h;
        // raw Kronrod-Gauss difference plus a rounding floor
        err[j] = ((k[j] - g[j]) * h).abs() + 10.0 * f64::EPSILON * val[j].abs();
    }
    Panel { a, b, val, err }
}

/// Integrate the three components of `f` over `[a, b]` until the summed
/// error of each component is below its tolerance.
fn adaptive(
    f: &impl Fn(f64) -> [f64; 3],
    a: f64,
    b: f64,
    initial: usize,
    spec: &QuadratureSpec,
    scale: [f64; 3],
) -> Result<([f64; 3], [f64; 3]), OracleError> {
    let mut panels: Vec<Panel> = (0..initial)
        .map(|i| {
            let lo = a + (b - a) * i as f64 / initial as f64;
            let hi = a + (b - a) * (i + 1) as f64 / initial as f64;
            gk15(f, lo, hi)
        })
        .collect();
    loop {
        let mut val = [0.0; 3];
        let mut err = [0.0; 3];
        for p in &panels {
            for j in 0..3 {
                val[j] += p.val[j];
                err[j] += p.err[j];
            }
        }
        let tol: Vec<f64> = (0..3)
            .map(|j| spec.abs_tol.max(spec.rel_tol * scale[j].max(val[j].abs())))
            .collect();
        if (0..3).all(|j| err[j] <= tol[j]) {
            return Ok((val, err));
        }
        if panels.len() >= spec.max_subdivisions {
            return Err(OracleError::ToleranceNotReached {
                estimate: val[0],
                error: err[0],
            });
        }
        // split the panel with the worst tolerance-relative error
        let worst = panels
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let w = (0..3).map(|j| p.err[j] / tol[j]).fold(0.0, f64::max);
                (i, w)
            })
            .max_by(|x, y| x.1.total_cmp(&y.1))
            .map(|(i, _)| i)
            .unwrap();
        let p = panels.swap_remove(worst);
        let mid = 0.5 * (p.a + p.b);
        if !(mid > p.a && mid < p.b) {
            return Err(OracleError::ToleranceNotReached {
                estimate: val[0],
                error: err[0],
            });
        }
        panels.push(gk15(f, p.a, mid));
        panels.push(gk15(f, mid, p.b));
    }
}

/// One continuous piece: log-density `logf` on `[lo, hi]` (possibly infinite).
struct Piece<F: Fn(f64) -> f64> {
    logf: F,
    lo: f64,
    hi: f64,
    /// Bracket that is known to contain the mode.
    bracket: (f64, f64),
}

struct PieceResult {
    log_mass: f64,
    mean: f64,
    var: f64,
    mean_err: f64,
    var_err: f64,
}

fn golden_max(f: &impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    let r = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    for _ in 0..200 {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
        if (b - a).abs() <= 1e-15 * (a.abs() + b.abs()) + 1e-300 {
            break;
        }
    }
    let m = 0.5 * (a + b);
    // the endpoints may be better when the maximum sits on the boundary
    [a, m, b]
        .into_iter()
        .max_by(|x, y| f(*x).total_cmp(&f(*y)))
        .unwrap()
}

/// Distance from `mode` (towards `dir`) at which `logf` first falls below
/// `top - DROP`, clipped to the domain edge.
fn edge(logf: &impl Fn(f64) -> f64, mode: f64, top: f64, dir: f64, limit: f64) -> f64 {
    let room = (limit - mode).abs();
    if room == 0.0 {
        return mode;
    }
    let mut step = 1e-14 * (1.0 + mode.abs());
    let mut prev = 0.0;
    loop {
        if step >= room {
            if logf(limit) >= top - DROP {
                return limit;
            }
            step = room;
            break;
        }
        if logf(mode + dir * step) < top - DROP {
            break;
        }
        prev = step;
        step *= 2.0;
    }
    let (mut inside, mut outside) = (prev, step);
    for _ in 0..200 {
        let mid = 0.5 * (inside + outside);
        if mid == inside || mid == outside {
            break;
        }
        if logf(mode + dir * mid) < top - DROP {
            outside = mid;
        } else {
            inside = mid;
        }
    }
    mode + dir * outside
}

fn integrate_piece<F: Fn(f64) -> f64>(
    piece: &Piece<F>,
    spec: &QuadratureSpec,
) -> Result<PieceResult, OracleError> {
    let logf = &piece.logf;
    let (ba, bb) = piece.bracket;
    let mode = golden_max(logf, ba.max(piece.lo), bb.min(piece.hi));
    let top = logf(mode);
    let left = edge(logf, mode, top, -1.0, piece.lo);
    let right = edge(logf, mode, top, 1.0, piece.hi);

    let f = |h: f64| {
        let w = (logf(h) - top).exp();
        let d = h - mode;
        [w, w * d, w * d * d]
    };
    // first pass sets the scale of each component for the relative tolerance
    let coarse = gk15(&f, left, right);
    let width = right - left;
    let scale = [
        coarse.val[0].abs(),
        coarse.val[0].abs() * width,
        coarse.val[0].abs() * width * width,
    ];
    // the window spans roughly 20 standard deviations
    let scale = [scale[0], scale[1] / 20.0, scale[2] / 400.0];
    let ([i0, i1, i2], [e0, e1, e2]) = adaptive(&f, left, right, 16, spec, scale)?;
    if !(i0 > 0.0) {
        return Err(OracleError::ToleranceNotReached {
            estimate: i0,
            error: e0,
        });
    }
    let m1 = i1 / i0;
    let var = i2 / i0 - m1 * m1;
    let mean_err = e1 / i0 + m1.abs() * e0 / i0;
    let var_err = e2 / i0 + (i2 / i0).abs() * e0 / i0 + 2.0 * m1.abs() * mean_err;
    Ok(PieceResult {
        log_mass: i0.ln() + top,
        mean: mode + m1,
        var,
        mean_err,
        var_err,
    })
}

/// Combine weighted components (`log_mass`, mean, var) into one distribution.
fn combine(parts: &[PieceResult]) -> (f64, f64, f64, f64, f64) {
    let log_z = parts
        .iter()
        .map(|p| p.log_mass)
        .fold(f64::NEG_INFINITY, crate::special::log_add_exp);
    let w: Vec<f64> = parts.iter().map(|p| (p.log_mass - log_z).exp()).collect();
    let mean: f64 = parts.iter().zip(&w).map(|(p, w)| w * p.mean).sum();
    let var: f64 = parts
        .iter()
        .zip(&w)
        .map(|(p, w)| w * (p.var + (p.mean - mean).powi(2)))
        .sum();
    let mean_err: f64 = parts.iter().zip(&w).map(|(p, w)| w * p.mean_err).sum();
    let var_err: f64 = parts.iter().zip(&w).map(|(p, w)| w * p.var_err).sum();
    (log_z, mean, var, mean_err, var_err)
}

/// Tilted moments of `prior` against `cav` by numerical integration.
pub fn quad_moments(
    prior: &SitePrior,
    cav: CavityParams,
    spec: &QuadratureSpec,
) -> Result<QuadMoments, OracleError> {
    spec.validate()?;
    cav.validate()?;
    prior.validate()?;
    let CavityParams { mu, sigma } = cav;
    let sd = sigma.sqrt();
    let cavity = move |h: f64| gauss_log_pdf(h, mu, sigma);
    let reach = 12.0 * sd;

    let mut parts = Vec::new();
    // Point mass at zero has no first or second moment about zero.
    let mut atom: Option<f64> = None;

    match *prior {
        SitePrior::SpikeSlab(p) => {
            if p.rho < 1.0 {
                atom = Some((1.0 - p.rho).ln() + gauss_log_pdf(0.0, mu, sigma));
            }
            if p.rho > 0.0 {
                let slab_var = 1.0 / p.lambda;
                let piece = Piece {
                    logf: move |h: f64| p.rho.ln() + gauss_log_pdf(h, 0.0, slab_var) + cavity(h),
                    lo: f64::NEG_INFINITY,
                    hi: f64::INFINITY,
                    bracket: (mu.min(0.0) - reach, mu.max(0.0) + reach),
                };
                parts.push(integrate_piece(&piece, spec)?);
            }
        }
        SitePrior::Theta => {
            let piece = Piece {
                logf: cavity,
                lo: 0.0,
                hi: f64::INFINITY,
                bracket: (0.0, mu.max(0.0) + reach),
            };
            parts.push(integrate_piece(&piece, spec)?);
        }
        SitePrior::ThetaMixture(p) => {
            let eta = p.eta;
            if eta > 0.0 {
                let piece = Piece {
                    logf: move |h: f64| eta.ln() + cavity(h),
                    lo: 0.0,
                    hi: f64::INFINITY,
                    bracket: (0.0, mu.max(0.0) + reach),
                };
                parts.push(integrate_piece(&piece, spec)?);
            }
            if eta < 1.0 {
                let piece = Piece {
                    logf: move |h: f64| (1.0 - eta).ln() + cavity(h),
                    lo: f64::NEG_INFINITY,
                    hi: 0.0,
                    bracket: (mu.min(0.0) - reach, 0.0),
                };
                parts.push(integrate_piece(&piece, spec)?);
            }
        }
    }

    if let Some(log_atom) = atom {
        parts.push(PieceResult {
            log_mass: log_atom,
            mean: 0.0,
            var: 0.0,
            mean_err: 0.0,
            var_err: 0.0,
        });
    }
    let (log_z, mean, var, mean_err, var_err) = combine(&parts);
    Ok(QuadMoments {
        moments: MomentTriple {
            log_z,
            mean,
            second: var + mean * mean,
            var,
        },
        mean_err,
        var_err,
    })
}
