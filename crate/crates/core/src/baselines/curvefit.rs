//! Integral-form leeway model `d_j(t) = c1 I_w,j(t) + c2 I_a,j(t) + c3 t`,
//! with `I` the running integrals of current and wind velocity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::physics::{EnvSample, Vec2};

/// Designs with a larger (column-scaled) condition number are rejected.
pub const MAX_CONDITION: f64 = 1e10;
/// Above this the normal equations lose too many digits; QR is used.
const QR_CONDITION: f64 = 1e3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveFitCoeffs {
    /// `(c1, c2, c3)` for the x axis.
    pub x: [f64; 3],
    pub y: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveFit {
    pub coeffs: CurveFitCoeffs,
    /// Condition number of each axis' scaled design.
    pub condition: [f64; 2],
    pub rows: usize,
}

/// Running trapezoidal integral, starting at zero.
pub fn trapezoid(t: &[f64], v: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(t.len());
    let mut acc = 0.0;
    for i in 0..t.len() {
        if i > 0 {
            acc += 0.5 * (v[i] + v[i - 1]) * (t[i] - t[i - 1]);
        }
        out.push(acc);
    }
    out
}

/// Per-axis regressor rows `[I_w, I_a, t - t0]` for one series.
pub fn regressors(samples: &[EnvSample]) -> [Vec<[f64; 3]>; 2] {
    let t: Vec<f64> = samples.iter().map(|s| s.t).collect();
    let t0 = t.first().copied().unwrap_or(0.0);
    let axis = |j: usize| {
        let iw = trapezoid(&t, &samples.iter().map(|s| s.v_w[j]).collect::<Vec<_>>());
        let ia = trapezoid(&t, &samples.iter().map(|s| s.v_a[j]).collect::<Vec<_>>());
        (0..t.len()).map(|i| [iw[i], ia[i], t[i] - t0]).collect()
    };
    [axis(0), axis(1)]
}

impl CurveFit {
    /// Pooled least squares over several `(samples, drift)` series. Drift
    /// is taken relative to each series' first position.
    pub fn fit<'a>(series: impl IntoIterator<Item = (&'a [EnvSample], &'a [Vec2])>) -> Result<CurveFit> {
        let mut design: [Vec<[f64; 3]>; 2] = [Vec::new(), Vec::new()];
        let mut target: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
        for (samples, drift) in series {
            if samples.len() != drift.len() {
                return Err(Error::ShapeMismatch {
                    op: "curvefit",
                    left: vec![samples.len()],
                    right: vec![drift.len()],
                });
            }
            let Some(d0) = drift.first() else { continue };
            let r = regressors(samples);
            for j in 0..2 {
                design[j].extend_from_slice(&r[j]);
                target[j].extend(drift.iter().map(|d| d[j] - d0[j]));
            }
        }
        if design[0].len() < 3 {
            return Err(Error::invalid(format!("curve fit needs at least 3 rows, got {}", design[0].len())));
        }
        let (cx, kx) = least_squares(&design[0], &target[0], 'x')?;
        let (cy, ky) = least_squares(&design[1], &target[1], 'y')?;
        Ok(CurveFit { coeffs: CurveFitCoeffs { x: cx, y: cy }, condition: [kx, ky], rows: design[0].len() })
    }

    /// Positions `origin + d(t)` at every sample.
    pub fn predict(&self, samples: &[EnvSample], origin: Vec2) -> Vec<Vec2> {
        predict(&self.coeffs, samples, origin)
    }
}

pub fn predict(c: &CurveFitCoeffs, samples: &[EnvSample], origin: Vec2) -> Vec<Vec2> {
    let r = regressors(samples);
    let dot = |a: &[f64; 3], b: &[f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    (0..samples.len())
        .map(|i| [origin[0] + dot(&c.x, &r[0][i]), origin[1] + dot(&c.y, &r[1][i])])
        .collect()
}

/// Eigenvalues of a symmetric 3x3 matrix by cyclic Jacobi rotations.
fn sym_eigenvalues(mut a: [[f64; 3]; 3]) -> [f64; 3] {
    for _ in 0..64 {
        let off = a[0][1].powi(2) + a[0][2].powi(2) + a[1][2].powi(2);
        if off < 1e-30 * (a[0][0].powi(2) + a[1][1].powi(2) + a[2][2].powi(2)).max(1e-300) {
            break;
        }
        for (p, q) in [(0, 1), (0, 2), (1, 2)] {
            if a[p][q] == 0.0 {
                continue;
            }
            let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let c = 1.0 / (t * t + 1.0).sqrt();
            let s = t * c;
            let mut r = a;
            for k in 0..3 {
                r[k][p] = c * a[k][p] - s * a[k][q];
                r[k][q] = s * a[k][p] + c * a[k][q];
            }
            let mut out = r;
            for k in 0..3 {
                out[p][k] = c * r[p][k] - s * r[q][k];
                out[q][k] = s * r[p][k] + c * r[q][k];
            }
            a = out;
        }
    }
    [a[0][0], a[1][1], a[2][2]]
}

fn cholesky_solve(a: [[f64; 3]; 3], b: [f64; 3]) -> Option<[f64; 3]> {
    let mut l = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..=i {
            let s = a[i][j] - (0..j).map(|k| l[i][k] * l[j][k]).sum::<f64>();
            if i == j {
                if s <= 0.0 {
                    return None;
                }
                l[i][i] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    let mut z = [0.0; 3];
    for i in 0..3 {
        z[i] = (b[i] - (0..i).map(|k| l[i][k] * z[k]).sum::<f64>()) / l[i][i];
    }
    let mut x = [0.0; 3];
    for i in (0..3).rev() {
        x[i] = (z[i] - (i + 1..3).map(|k| l[k][i] * x[k]).sum::<f64>()) / l[i][i];
    }
    Some(x)
}

/// Householder QR least squares for an `n x 3` system.
fn qr_solve(x: &[[f64; 3]], y: &[f64]) -> [f64; 3] {
    let n = x.len();
    let mut a: Vec<[f64; 3]> = x.to_vec();
    let mut b = y.to_vec();
    for k in 0..3 {
        let norm = (k..n).map(|i| a[i][k] * a[i][k]).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let alpha = if a[k][k] > 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = (k..n).map(|i| a[i][k]).collect();
        v[0] -= alpha;
        let vv = v.iter().map(|e| e * e).sum::<f64>();
        if vv == 0.0 {
            continue;
        }
        for j in k..3 {
            let d = (k..n).map(|i| v[i - k] * a[i][j]).sum::<f64>() * 2.0 / vv;
            for i in k..n {
                a[i][j] -= d * v[i - k];
            }
        }
        let d = (k..n).map(|i| v[i - k] * b[i]).sum::<f64>() * 2.0 / vv;
        for i in k..n {
            b[i] -= d * v[i - k];
        }
    }
    let mut c = [0.0; 3];
    for i in (0..3).rev() {
        c[i] = (b[i] - (i + 1..3).map(|k| a[i][k] * c[k]).sum::<f64>()) / a[i][i];
    }
    c
}

/// Solves `min |X c - y|` with column scaling. Returns the coefficients and
/// the condition number of the scaled design.
pub fn least_squares(x: &[[f64; 3]], y: &[f64], axis: char) -> Result<([f64; 3], f64)> {
    let mut scale = [0.0; 3];
    for r in x {
        for k in 0..3 {
            scale[k] += r[k] * r[k];
        }
    }
    let scale = scale.map(f64::sqrt);
    if scale.iter().any(|&s| s == 0.0 || !s.is_finite()) {
        return Err(Error::RankDeficient { axis, condition_number: f64::INFINITY });
    }
    let xs: Vec<[f64; 3]> = x.iter().map(|r| [r[0] / scale[0], r[1] / scale[1], r[2] / scale[2]]).collect();
    let mut ata = [[0.0; 3]; 3];
    let mut aty = [0.0; 3];
    for (r, &t) in xs.iter().zip(y) {
        for i in 0..3 {
            aty[i] += r[i] * t;
            for j in 0..3 {
                ata[i][j] += r[i] * r[j];
            }
        }
    }
    let eig = sym_eigenvalues(ata);
    let (lo, hi) = eig.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &e| (lo.min(e), hi.max(e)));
    let cond = if lo <= 0.0 { f64::INFINITY } else { (hi / lo).sqrt() };
    if cond > MAX_CONDITION {
        return Err(Error::RankDeficient { axis, condition_number: cond });
    }
    let c = match (cond <= QR_CONDITION).then(|| cholesky_solve(ata, aty)).flatten() {
        Some(c) => c,
        None => qr_solve(&xs, y),
    };
    Ok(([c[0] / scale[0], c[1] / scale[1], c[2] / scale[2]], cond))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trapezoid_of_constant_is_exact() {
        let t: Vec<f64> = (0..50).map(|i| i as f64 * 0.5).collect();
        let v = vec![1.25; 50];
        let i = trapezoid(&t, &v);
        for (a, b) in i.iter().zip(&t) {
            assert_eq!(*a, 1.25 * b);
        }
    }

    #[test]
    fn eigenvalues_of_diagonalizable() {
        let a = [[2.0, 1.0, 0.0], [1.0, 2.0, 0.0], [0.0, 0.0, 5.0]];
        let mut e = sym_eigenvalues(a);
        e.sort_by(f64::total_cmp);
        for (x, y) in e.iter().zip([1.0, 3.0, 5.0]) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn qr_and_cholesky_agree() {
        let x: Vec<[f64; 3]> = (0..20).map(|i| [i as f64, (i * i) as f64 * 0.1, 1.0]).collect();
        let y: Vec<f64> = (0..20).map(|i| (i as f64).sin()).collect();
        let mut ata = [[0.0; 3]; 3];
        let mut aty = [0.0; 3];
        for (r, t) in x.iter().zip(&y) {
            for i in 0..3 {
                aty[i] += r[i] * t;
                for j in 0..3 {
                    ata[i][j] += r[i] * r[j];
                }
            }
        }
        let a = cholesky_solve(ata, aty).unwrap();
        let b = qr_solve(&x, &y);
        for k in 0..3 {
            assert!((a[k] - b[k]).abs() < 1e-9);
        }
    }
}
