//! Cubic smoothing spline for REBA score sequences.
//!
//! For frames `t = 0..T` the spline `g` minimizes
//! `sum (y_t - g_t)^2 + lambda * integral g''^2`. With unit knot spacing this
//! is the Reinsch system `(R + lambda Q'Q) c = Q'y`, `g = y - lambda Q c`,
//! where `Q` is the `T x (T-2)` second-difference matrix and `R` the
//! tridiagonal `(T-2) x (T-2)` matrix with 2/3 on the diagonal and 1/6 off it.
//! `lambda` is chosen so the residual sum of squares equals the budget
//! `smoothing * T`.

/// Residual budget per frame used when a dataset does not specify one.
pub const DEFAULT_SMOOTHING: f64 = 1.0;

const MIN_FRAMES: usize = 4;
const BISECTION_STEPS: usize = 200;

/// Smooths `raw` with a residual budget of `smoothing * raw.len()`.
///
/// Sequences shorter than 4 frames, and budgets of zero or less, return the
/// raw values. A budget at least as large as the residual of the
/// least-squares line returns that line.
pub fn smooth_scores(raw: &[u8], smoothing: f64) -> Vec<f64> {
    let y: Vec<f64> = raw.iter().map(|&v| f64::from(v)).collect();
    smooth_values(&y, smoothing)
}

pub(crate) fn smooth_values(y: &[f64], smoothing: f64) -> Vec<f64> {
    let n = y.len();
    let budget = smoothing * n as f64;
    if n < MIN_FRAMES || !(budget > 0.0) {
        return y.to_vec();
    }
    let line = linear_fit(y);
    if rss(y, &line) <= budget {
        return line;
    }
    // rss(lambda) increases from 0 toward the line's residual
    let (mut lo, mut hi) = (-30.0f64, 30.0f64);
    let mut best = y.to_vec();
    for _ in 0..BISECTION_STEPS {
        let mid = 0.5 * (lo + hi);
        let fit = fit_lambda(y, 10f64.powf(mid));
        if rss(y, &fit) > budget {
            hi = mid;
        } else {
            lo = mid;
            best = fit;
        }
        if hi - lo < 1e-12 {
            break;
        }
    }
    best
}

fn rss(y: &[f64], g: &[f64]) -> f64 {
    y.iter().zip(g).map(|(a, b)| (a - b) * (a - b)).sum()
}

fn linear_fit(y: &[f64]) -> Vec<f64> {
    let n = y.len() as f64;
    let mean_t = (n - 1.0) / 2.0;
    let mean_y = y.iter().sum::<f64>() / n;
    let (mut sty, mut stt) = (0.0, 0.0);
    for (t, v) in y.iter().enumerate() {
        let dt = t as f64 - mean_t;
        sty += dt * (v - mean_y);
        stt += dt * dt;
    }
    let slope = sty / stt;
    (0..y.len()).map(|t| mean_y + slope * (t as f64 - mean_t)).collect()
}

/// Spline values for a fixed `lambda`.
fn fit_lambda(y: &[f64], lambda: f64) -> Vec<f64> {
    let n = y.len();
    let m = n - 2;
    // Q'y: second differences
    let rhs: Vec<f64> = (0..m).map(|j| y[j] - 2.0 * y[j + 1] + y[j + 2]).collect();
    // Q'Q is pentadiagonal with bands (6, -4, 1)
    let d0 = vec![2.0 / 3.0 + 6.0 * lambda; m];
    let d1 = vec![1.0 / 6.0 - 4.0 * lambda; m.saturating_sub(1)];
    let d2 = vec![lambda; m.saturating_sub(2)];
    let c = solve_pentadiagonal(&d0, &d1, &d2, &rhs);
    // g = y - lambda Q c
    let mut g = y.to_vec();
    for j in 0..m {
        g[j] -= lambda * c[j];
        g[j + 1] += 2.0 * lambda * c[j];
        g[j + 2] -= lambda * c[j];
    }
    g
}

/// Solves a symmetric positive definite pentadiagonal system by banded
/// `L D L'` factorization. `d0` is the diagonal, `d1` and `d2` the first and
/// second super-diagonals.
fn solve_pentadiagonal(d0: &[f64], d1: &[f64], d2: &[f64], b: &[f64]) -> Vec<f64> {
    let m = d0.len();
    let mut d = vec![0.0; m];
    let mut l1 = vec![0.0; m];
    let mut l2 = vec![0.0; m];
    for i in 0..m {
        let mut di = d0[i];
        if i >= 1 {
            di -= l1[i - 1] * l1[i - 1] * d[i - 1];
        }
        if i >= 2 {
            di -= l2[i - 2] * l2[i - 2] * d[i - 2];
        }
        d[i] = di;
        if i + 1 < m {
            let mut v = d1[i];
            if i >= 1 {
                v -= l2[i - 1] * l1[i - 1] * d[i - 1];
            }
            l1[i] = v / di;
        }
        if i + 2 < m {
            l2[i] = d2[i] / di;
        }
    }
    let mut z = b.to_vec();
    for i in 0..m {
        if i >= 1 {
            z[i] -= l1[i - 1] * z[i - 1];
        }
        if i >= 2 {
            z[i] -= l2[i - 2] * z[i - 2];
        }
    }
    for i in 0..m {
        z[i] /= d[i];
    }
    for i in (0..m).rev() {
        if i + 1 < m {
            z[i] -= l1[i] * z[i + 1];
        }
        if i + 2 < m {
            z[i] -= l2[i] * z[i + 2];
        }
    }
    z
}
