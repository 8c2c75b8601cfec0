//! Adaptive Simpson quadrature and small dense linear algebra.

use crate::error::{Error, Result};

/// Adaptive Simpson on `[a, b]` to absolute tolerance `tol`, bisecting at most `max_depth` levels.
pub fn adaptive_simpson<F>(f: F, a: f64, b: f64, tol: f64, max_depth: u32) -> Result<f64>
where
    F: Fn(f64) -> Result<f64>,
{
    if a == b {
        return Ok(0.0);
    }
    let fa = f(a)?;
    let fb = f(b)?;
    let m = 0.5 * (a + b);
    let fm = f(m)?;
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    let mut converged = true;
    let v = simpson_step(&f, a, b, fa, fm, fb, whole, tol, max_depth, &mut converged)?;
    if converged {
        Ok(v)
    } else {
        Err(Error::Quadrature(format!("adaptive Simpson on [{a}, {b}] hit the depth cap {max_depth}")))
    }
}

#[allow(clippy::too_many_arguments)]
fn simpson_step<F>(
    f: &F,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
    converged: &mut bool,
) -> Result<f64>
where
    F: Fn(f64) -> Result<f64>,
{
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm)?;
    let frm = f(rm)?;
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if delta.abs() <= 15.0 * tol {
        return Ok(left + right + delta / 15.0);
    }
    if depth == 0 {
        *converged = false;
        return Ok(left + right + delta / 15.0);
    }
    Ok(simpson_step(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1, converged)?
        + simpson_step(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1, converged)?)
}

/// Lower Cholesky factor of a symmetric positive definite row-major matrix.
pub fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = a[i * n + j] - (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum::<f64>();
            if i == j {
                if s <= 0.0 {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Some(l)
}

/// Solves `L y = b` for lower-triangular `L`.
pub fn forward_solve(l: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut y = vec![0.0; n];
    for i in 0..n {
        y[i] = (b[i] - (0..i).map(|k| l[i * n + k] * y[k]).sum::<f64>()) / l[i * n + i];
    }
    y
}

/// Determinant and inverse by Gaussian elimination with partial pivoting.
pub fn det_inverse(a: &[f64], n: usize) -> Option<(f64, Vec<f64>)> {
    let mut m = a.to_vec();
    let mut inv = vec![0.0; n * n];
    for i in 0..n {
        inv[i * n + i] = 1.0;
    }
    let mut det = 1.0;
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| m[i * n + c].abs().total_cmp(&m[j * n + c].abs()))?;
        if m[p * n + c].abs() < 1e-300 {
            return None;
        }
        if p != c {
            for k in 0..n {
                m.swap(p * n + k, c * n + k);
                inv.swap(p * n + k, c * n + k);
            }
            det = -det;
        }
        let piv = m[c * n + c];
        det *= piv;
        for k in 0..n {
            m[c * n + k] /= piv;
            inv[c * n + k] /= piv;
        }
        for r in 0..n {
            if r != c {
                let f = m[r * n + c];
                if f != 0.0 {
                    for k in 0..n {
                        m[r * n + k] -= f * m[c * n + k];
                        inv[r * n + k] -= f * inv[c * n + k];
                    }
                }
            }
        }
    }
    Some((det, inv))
}

/// Matrix exponential by scaling and squaring with a Taylor core.
pub fn expm(a: &[f64], n: usize) -> Vec<f64> {
    let norm = (0..n).map(|i| (0..n).map(|j| a[i * n + j].abs()).sum::<f64>()).fold(0.0, f64::max);
    let mut s = 0;
    while norm / f64::powi(2.0, s) > 0.25 {
        s += 1;
    }
    let scale = f64::powi(2.0, s);
    let b: Vec<f64> = a.iter().map(|v| v / scale).collect();
    let mut result = vec![0.0; n * n];
    let mut term = vec![0.0; n * n];
    for i in 0..n {
        result[i * n + i] = 1.0;
        term[i * n + i] = 1.0;
    }
    for k in 1..=20 {
        term = matmul(&term, &b, n);
        term.iter_mut().for_each(|v| *v /= k as f64);
        for (r, t) in result.iter_mut().zip(&term) {
            *r += t;
        }
    }
    for _ in 0..s {
        result = matmul(&result, &result, n);
    }
    result
}

pub fn matmul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            for j in 0..n {
                c[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simpson_integrates_smooth_functions() {
        let v = adaptive_simpson(|t| Ok(t), 0.0, 1.0, 1e-10, 40).unwrap();
        assert!((v - 0.5).abs() < 1e-12);
        let v = adaptive_simpson(|t| Ok((-t).exp()), 0.0, 2.0, 1e-10, 40).unwrap();
        assert!((v - (1.0 - (-2.0f64).exp())).abs() < 1e-10);
        let v = adaptive_simpson(|t| Ok(t.sqrt()), 0.0, 1.0, 1e-8, 40).unwrap();
        assert!((v - 2.0 / 3.0).abs() < 1e-7);
    }

    #[test]
    fn depth_cap_reports_failure() {
        assert!(adaptive_simpson(|t| Ok(if t < 0.3 { 0.0 } else { 1.0 }), 0.0, 1.0, 1e-14, 3).is_err());
    }

    #[test]
    fn dense_helpers() {
        let a = [4.0, 2.0, 2.0, 3.0];
        let l = cholesky(&a, 2).unwrap();
        let back: Vec<f64> = (0..4).map(|k| {
            let (i, j) = (k / 2, k % 2);
            (0..2).map(|m| l[i * 2 + m] * l[j * 2 + m]).sum()
        }).collect();
        for (x, y) in back.iter().zip(&a) {
            assert!((x - y).abs() < 1e-14);
        }
        let (det, inv) = det_inverse(&a, 2).unwrap();
        assert!((det - 8.0).abs() < 1e-14);
        let id = matmul(&a, &inv, 2);
        assert!((id[0] - 1.0).abs() < 1e-14 && id[1].abs() < 1e-14);
        let e = expm(&[-1.0, 1.0, 0.0, 0.0], 2);
        assert!((e[0] - (-1.0f64).exp()).abs() < 1e-14);
        assert!((e[1] - (1.0 - (-1.0f64).exp())).abs() < 1e-14);
    }
}
