//! Thin SVD by one-sided (Hestenes) Jacobi rotations.

use serde::{Deserialize, Serialize};

use super::{dot, ensure_finite, norm, Matrix};
use crate::error::{Error, Result};

pub const DEFAULT_SVD_SWEEP_CAP: usize = 80;

/// `w = u · diag(sigma) · vᵀ` with `p = min(d, k)` singular triplets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvdFactorization {
    /// `d × p`, orthonormal columns.
    pub u: Matrix,
    /// Nonincreasing, nonnegative.
    pub sigma: Vec<f64>,
    /// `k × p`, orthonormal columns.
    pub v: Matrix,
}

impl SvdFactorization {
    pub fn reconstruct(&self) -> Matrix {
        let us = Matrix::from_fn(self.u.rows(), self.u.cols(), |i, j| self.u[(i, j)] * self.sigma[j]);
        us.matmul_t(&self.v).expect("factor shapes agree")
    }
}

pub fn svd(w: &Matrix) -> Result<SvdFactorization> {
    svd_with_cap(w, DEFAULT_SVD_SWEEP_CAP)
}

/// SVD with an explicit cap on the number of Jacobi sweeps.
pub fn svd_with_cap(w: &Matrix, max_sweeps: usize) -> Result<SvdFactorization> {
    ensure_finite(w)?;
    if w.rows() >= w.cols() {
        jacobi(w, max_sweeps)
    } else {
        let t = jacobi(&w.transpose(), max_sweeps)?;
        Ok(SvdFactorization {
            u: t.v,
            sigma: t.sigma,
            v: t.u,
        })
    }
}

// Requires rows >= cols.
fn jacobi(w: &Matrix, max_sweeps: usize) -> Result<SvdFactorization> {
    let (d, k) = w.shape();
    let mut work = w.columns();
    let mut vecs: Vec<Vec<f64>> = (0..k)
        .map(|j| {
            let mut e = vec![0.0; k];
            e[j] = 1.0;
            e
        })
        .collect();

    let tol = f64::EPSILON;
    // columns below this squared norm are numerical zeros; rotating them
    // against anything only reshuffles rounding noise
    let negligible = (tol * w.frobenius_norm()).powi(2);
    let mut converged = k < 2;
    for _ in 0..max_sweeps {
        if converged {
            break;
        }
        let mut rotated = false;
        for p in 0..k - 1 {
            for q in p + 1..k {
                let alpha = dot(&work[p], &work[p]);
                let beta = dot(&work[q], &work[q]);
                let gamma = dot(&work[p], &work[q]);
                if gamma == 0.0
                    || alpha <= negligible
                    || beta <= negligible
                    || gamma.abs() <= tol * (alpha * beta).sqrt()
                {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut work, p, q, c, s);
                rotate(&mut vecs, p, q, c, s);
            }
        }
        converged = !rotated;
    }
    if !converged {
        return Err(Error::NoConvergence { cap: max_sweeps });
    }

    let norms: Vec<f64> = work.iter().map(|c| norm(c)).collect();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));

    let sigma: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut deficient = Vec::new();
    for (slot, &j) in order.iter().enumerate() {
        if norms[j] > f64::MIN_POSITIVE {
            u_cols.push(work[j].iter().map(|v| v / norms[j]).collect());
        } else {
            u_cols.push(vec![0.0; d]);
            deficient.push(slot);
        }
    }
    complete_basis(&mut u_cols, &deficient, d);
    let v_cols: Vec<Vec<f64>> = order.iter().map(|&j| vecs[j].clone()).collect();

    Ok(SvdFactorization {
        u: Matrix::from_columns(&u_cols)?,
        sigma,
        v: Matrix::from_columns(&v_cols)?,
    })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    for (x, y) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Fills the `missing` slots with unit vectors orthogonal to every other
/// column, drawing candidates from the standard basis.
fn complete_basis(cols: &mut [Vec<f64>], missing: &[usize], d: usize) {
    for &slot in missing {
        let mut best: Option<(f64, Vec<f64>)> = None;
        for e in 0..d {
            let mut cand = vec![0.0; d];
            cand[e] = 1.0;
            for _ in 0..2 {
                for (idx, c) in cols.iter().enumerate() {
                    if idx == slot || (missing.contains(&idx) && c.iter().all(|&v| v == 0.0)) {
                        continue;
                    }
                    let proj = dot(c, &cand);
                    for (x, y) in cand.iter_mut().zip(c) {
                        *x -= proj * y;
                    }
                }
            }
            let n = norm(&cand);
            if best.as_ref().is_none_or(|(bn, _)| n > *bn) {
                best = Some((n, cand));
            }
        }
        let (n, cand) = best.expect("d > 0");
        cols[slot] = cand.into_iter().map(|v| v / n).collect();
    }
}
