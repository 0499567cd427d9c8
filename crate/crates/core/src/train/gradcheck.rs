//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{backward, half_mse, ParamVector};
use crate::adapter::DualAdapterLinear;
use crate::error::Result;
use crate::linalg::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FdOptions {
    /// Above this many parameters a seeded random subset is checked.
    pub max_entries: usize,
    pub seed: u64,
    /// Lower bound on the relative-error denominator, so entries whose true
    /// gradient is ~0 are compared in absolute terms.
    pub denom_floor: f64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            max_entries: 4096,
            seed: 0,
            denom_floor: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub tol: f64,
    pub passed: bool,
}

/// Compares `analytic[i]` against `(L(θ+h·eᵢ) − L(θ−h·eᵢ)) / 2h` for every
/// (or a sampled subset of) parameter. The model is restored afterwards.
pub fn finite_diff_check<M, F>(model: &mut M, loss: F, analytic: &[f64], h: f64, tol: f64, opts: FdOptions) -> FdReport
where
    M: ParamVector,
    F: Fn(&M) -> f64,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let n = model.num_params();
    assert_eq!(analytic.len(), n, "analytic gradient length");
    let indices: Vec<usize> = if n > opts.max_entries {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut idx = sample(&mut rng, n, opts.max_entries).into_vec();
        idx.sort_unstable();
        idx
    } else {
        (0..n).collect()
    };

    let mut max_rel_error = 0.0f64;
    let mut worst_index = 0;
    for &i in &indices {
        let orig = model.param(i);
        model.set_param(i, orig + h);
        let plus = loss(model);
        model.set_param(i, orig - h);
        let minus = loss(model);
        model.set_param(i, orig);
        let numeric = (plus - minus) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(opts.denom_floor);
        let rel = (analytic[i] - numeric).abs() / denom;
        if rel > max_rel_error || rel.is_nan() {
            max_rel_error = rel;
            worst_index = i;
        }
    }
    FdReport {
        checked: indices.len(),
        max_rel_error,
        worst_index,
        tol,
        passed: max_rel_error <= tol,
    }
}

/// Scalar loss of a layer's output with a known output gradient.
pub trait OutputLoss {
    fn value(&self, out: &Matrix) -> f64;
    fn grad(&self, out: &Matrix) -> Matrix;
}

/// `Σ weights ⊙ out`.
pub struct LinearLoss(pub Matrix);

impl OutputLoss for LinearLoss {
    fn value(&self, out: &Matrix) -> f64 {
        self.0.as_slice().iter().zip(out.as_slice()).map(|(w, o)| w * o).sum()
    }

    fn grad(&self, _out: &Matrix) -> Matrix {
        self.0.clone()
    }
}

/// `0.5/n · ‖out − target‖²`.
pub struct HalfSquaredLoss(pub Matrix);

impl OutputLoss for HalfSquaredLoss {
    fn value(&self, out: &Matrix) -> f64 {
        half_mse(out, &self.0).expect("target shape matches output").0
    }

    fn grad(&self, out: &Matrix) -> Matrix {
        half_mse(out, &self.0).expect("target shape matches output").1
    }
}

/// Finite-difference check of [`backward`] for a single layer.
pub fn check_layer_gradients(
    layer: &DualAdapterLinear,
    x: &Matrix,
    loss: &dyn OutputLoss,
    h: f64,
    tol: f64,
) -> Result<FdReport> {
    let out = layer.forward(x)?;
    let analytic = backward(layer, x, &loss.grad(&out))?.flatten();
    let mut probe = layer.clone();
    Ok(finite_diff_check(
        &mut probe,
        |l: &DualAdapterLinear| loss.value(&l.forward(x).expect("shapes checked above")),
        &analytic,
        h,
        tol,
        FdOptions::default(),
    ))
}
