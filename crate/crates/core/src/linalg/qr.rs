//! Column-pivoted Householder QR (Businger–Golub pivoting).
//!
//! At step `i` the remaining column with the largest norm orthogonal to the
//! span of the already selected columns is swapped into position `i`, so
//! `W·P = Q·R` with `|r_00| ≥ |r_11| ≥ …`. Residual norms are downdated
//! after every reflection and recomputed from the reduced columns whenever
//! cancellation makes the downdated value untrustworthy.
//!
//! Ties (residual norms within [`PIVOT_TIE_RTOL`] of the largest column norm
//! of the input) go to the smallest original column index.

use serde::{Deserialize, Serialize};

use super::{ensure_finite, norm, Matrix};
use crate::error::{Error, Result};

/// Relative tolerance under which two residual norms count as tied. Scaled
/// by the largest column norm of the input matrix.
pub const PIVOT_TIE_RTOL: f64 = 1e-12;

/// Downdated norms that shrink below this fraction of the original column
/// norm are recomputed.
const RECOMPUTE_FRACTION: f64 = 1e-6;

/// Candidates within this relative band of the current maximum get their
/// norms recomputed before the tie rule is applied.
const REFRESH_BAND: f64 = 1e-6;

/// Result of [`rrqr`]: `w · P(perm) = q · r`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RrqrFactorization {
    /// `d × m` with orthonormal columns, `m = min(d, k)`.
    pub q: Matrix,
    /// `m × k` upper trapezoidal with a nonnegative, nonincreasing diagonal.
    pub r: Matrix,
    /// `perm[i]` is the original column index of the `i`-th pivoted column.
    pub perm: Vec<usize>,
}

impl RrqrFactorization {
    /// Number of pivoted directions, `min(d, k)`.
    pub fn rank_capacity(&self) -> usize {
        self.q.cols()
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.r.rows()).map(|i| self.r[(i, i)]).collect()
    }

    /// `q · r · Pᵀ`, i.e. the factorized matrix in its original column order.
    pub fn reconstruct(&self) -> Matrix {
        let qr = self.q.matmul(&self.r).expect("q and r shapes are consistent");
        qr.permute_columns(&permutation_inverse(&self.perm))
    }
}

/// Inverse of a permutation given as an index array.
pub fn permutation_inverse(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

struct Reflector {
    // v[0] == 1 implicitly stored
    v: Vec<f64>,
    tau: f64,
}

impl Reflector {
    /// Applies `I − τ v vᵀ` to `x` (the trailing part starting at the pivot row).
    fn apply(&self, x: &mut [f64]) {
        if self.tau == 0.0 {
            return;
        }
        let s: f64 = self.v.iter().zip(x.iter()).map(|(a, b)| a * b).sum();
        let f = self.tau * s;
        for (xi, vi) in x.iter_mut().zip(&self.v) {
            *xi -= f * vi;
        }
    }
}

/// Householder reflector zeroing `x[1..]`; returns it together with the new
/// leading entry.
fn householder(x: &[f64]) -> (Reflector, f64) {
    let x0 = x[0];
    let tail = norm(&x[1..]);
    let mut v = vec![0.0; x.len()];
    v[0] = 1.0;
    if tail == 0.0 {
        return (Reflector { v, tau: 0.0 }, x0);
    }
    let nrm = x0.hypot(tail);
    let beta = if x0 >= 0.0 { -nrm } else { nrm };
    let tau = (beta - x0) / beta;
    let denom = x0 - beta;
    for (vi, &xi) in v[1..].iter_mut().zip(&x[1..]) {
        *vi = xi / denom;
    }
    (Reflector { v, tau }, beta)
}

/// Column-pivoted QR of `w`.
pub fn rrqr(w: &Matrix) -> Result<RrqrFactorization> {
    ensure_finite(w)?;
    let (d, k) = w.shape();
    let m = d.min(k);

    let mut cols = w.columns();
    let mut perm: Vec<usize> = (0..k).collect();
    let mut original: Vec<f64> = cols.iter().map(|c| norm(c)).collect();
    // norm at the last exact recomputation, for the LAPACK-style cancellation test
    let mut reference = original.clone();
    let mut resid = original.clone();
    let tie_tol = PIVOT_TIE_RTOL * original.iter().copied().fold(0.0, f64::max);
    let cancel_guard = f64::EPSILON.sqrt();

    let mut reflectors = Vec::with_capacity(m);
    for i in 0..m {
        let best = resid[i..].iter().copied().fold(0.0, f64::max);
        for j in i..k {
            if resid[j] >= best * (1.0 - REFRESH_BAND) - tie_tol {
                resid[j] = norm(&cols[j][i..]);
                reference[j] = resid[j];
            }
        }
        let best = resid[i..].iter().copied().fold(0.0, f64::max);
        let pivot = (i..k)
            .filter(|&j| resid[j] >= best - tie_tol)
            .min_by_key(|&j| perm[j])
            .expect("at least one candidate attains the maximum");

        cols.swap(i, pivot);
        perm.swap(i, pivot);
        resid.swap(i, pivot);
        original.swap(i, pivot);
        reference.swap(i, pivot);

        let (h, beta) = householder(&cols[i][i..]);
        cols[i][i] = beta;
        for v in &mut cols[i][i + 1..] {
            *v = 0.0;
        }
        for col in &mut cols[i + 1..] {
            h.apply(&mut col[i..]);
        }
        reflectors.push(h);

        for j in i + 1..k {
            if resid[j] == 0.0 {
                continue;
            }
            let ratio = cols[j][i].abs() / resid[j];
            let shrink = (1.0 - ratio * ratio).max(0.0);
            let rel = resid[j] / reference[j];
            let downdated = resid[j] * shrink.sqrt();
            if shrink * rel * rel <= cancel_guard || downdated < RECOMPUTE_FRACTION * original[j] {
                resid[j] = if i + 1 < d { norm(&cols[j][i + 1..]) } else { 0.0 };
                reference[j] = resid[j];
            } else {
                resid[j] = downdated;
            }
        }
    }

    // Columns past min(d, k) carry no new direction; order them by index.
    if k > m {
        let mut tail: Vec<(usize, Vec<f64>)> = perm[m..].iter().copied().zip(cols.drain(m..)).collect();
        tail.sort_by_key(|(p, _)| *p);
        for (slot, (p, c)) in tail.into_iter().enumerate() {
            perm[m + slot] = p;
            cols.push(c);
        }
    }

    let mut r = Matrix::zeros(m, k);
    for (j, col) in cols.iter().enumerate() {
        for i in 0..m.min(j + 1) {
            r[(i, j)] = col[i];
        }
    }

    let mut q_cols: Vec<Vec<f64>> = (0..m)
        .map(|j| {
            let mut e = vec![0.0; d];
            e[j] = 1.0;
            e
        })
        .collect();
    for (i, h) in reflectors.iter().enumerate().rev() {
        for qc in &mut q_cols {
            h.apply(&mut qc[i..]);
        }
    }

    for i in 0..m {
        if r[(i, i)] < 0.0 {
            for j in i..k {
                r[(i, j)] = -r[(i, j)];
            }
            for v in &mut q_cols[i] {
                *v = -*v;
            }
        }
    }

    let q = Matrix::from_columns(&q_cols)?;
    Ok(RrqrFactorization { q, r, perm })
}

/// Literal greedy column selection: at every step the residuals of all
/// unselected columns are recomputed from scratch against a fresh
/// Gram–Schmidt basis of the selected ones.
///
/// Quadratic in work per step and meant as a reference for [`rrqr`]'s pivot
/// order, not for production use.
pub fn greedy_pivot_oracle(w: &Matrix) -> Result<Vec<usize>> {
    ensure_finite(w)?;
    let (d, k) = w.shape();
    let cols = w.columns();
    let scale = cols.iter().map(|c| norm(c)).fold(0.0, f64::max);
    let tie_tol = PIVOT_TIE_RTOL * scale;

    let mut selected: Vec<usize> = Vec::with_capacity(k);
    let mut remaining: Vec<usize> = (0..k).collect();
    while !remaining.is_empty() {
        let basis = orthonormal_basis(&cols, &selected, d, tie_tol);
        let norms: Vec<f64> = remaining
            .iter()
            .map(|&j| norm(&project_out(&cols[j], &basis)))
            .collect();
        let best = norms.iter().copied().fold(0.0, f64::max);
        // `remaining` stays sorted, so the first hit is the smallest index
        let pos = norms
            .iter()
            .position(|&n| n >= best - tie_tol)
            .ok_or_else(|| Error::Domain("no pivot candidate".into()))?;
        selected.push(remaining.remove(pos));
    }
    Ok(selected)
}

fn project_out(v: &[f64], basis: &[Vec<f64>]) -> Vec<f64> {
    let mut r = v.to_vec();
    // two classical passes keep the residual orthogonal to working precision
    for _ in 0..2 {
        for q in basis {
            let c: f64 = q.iter().zip(&r).map(|(a, b)| a * b).sum();
            for (ri, qi) in r.iter_mut().zip(q) {
                *ri -= c * qi;
            }
        }
    }
    r
}

fn orthonormal_basis(cols: &[Vec<f64>], selected: &[usize], d: usize, tie_tol: f64) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(selected.len().min(d));
    for &j in selected {
        if basis.len() == d {
            break;
        }
        let r = project_out(&cols[j], &basis);
        let n = norm(&r);
        if n > tie_tol && n > 0.0 {
            basis.push(r.into_iter().map(|v| v / n).collect());
        }
    }
    basis
}
