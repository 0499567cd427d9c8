//! Low-rank adapters and the dual-adapter linear layer.
//!
//! A [`DualAdapterLinear`] holds a frozen residual weight plus up to two
//! adapters. The RRQR strategies take the main adapter from the last
//! (minor) pivoted directions of `W₀·P = Q·R` and the sub adapter from the
//! first (major) ones:
//!
//! ```text
//! B_main = Q[:, m-r_main..m]    A_main[i, perm[m-r_main+i]] = 1
//! B_sub  = Q[:, ..r_sub]        A_sub[i, perm[i]]           = 1
//! W_res  = W₀ − B_main·A_main − B_sub·A_sub
//! ```
//!
//! so the freshly built layer reproduces `W₀·x`. Adapter products enter with
//! coefficient one; there is no `α/r` scaling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::linalg::{rrqr, svd, Matrix, RrqrFactorization, SvdFactorization};

pub const DEFAULT_MAIN_RANK: usize = 32;
pub const DEFAULT_SUB_RANK: usize = 4;
pub const DEFAULT_MAIN_LR_MULT: f64 = 1.0;
pub const DEFAULT_SUB_LR_MULT: f64 = 0.5;

const SUB_SEED_STREAM: u64 = 0x5eed_0000_0000_0005;

/// How the adapters of a layer are initialized.
///
/// Single-adapter strategies (`RrqrMainOnly`, `SvdMajor`) ignore `r_sub`;
/// `RrqrSubOnly` ignores `r_main`. `SvdMinor` pairs a minor-direction main
/// adapter with a major-direction sub adapter when `r_sub > 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitStrategy {
    RrqrDual,
    RrqrMainOnly,
    RrqrSubOnly,
    SvdMinor,
    SvdMajor,
    KaimingUniform,
}

impl InitStrategy {
    pub const ALL: [InitStrategy; 6] = [
        InitStrategy::RrqrDual,
        InitStrategy::RrqrMainOnly,
        InitStrategy::RrqrSubOnly,
        InitStrategy::SvdMinor,
        InitStrategy::SvdMajor,
        InitStrategy::KaimingUniform,
    ];

    pub fn is_rrqr(self) -> bool {
        matches!(self, Self::RrqrDual | Self::RrqrMainOnly | Self::RrqrSubOnly)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::RrqrDual => "rrqr-dual",
            Self::RrqrMainOnly => "rrqr-main-only",
            Self::RrqrSubOnly => "rrqr-sub-only",
            Self::SvdMinor => "svd-minor",
            Self::SvdMajor => "svd-major",
            Self::KaimingUniform => "kaiming-uniform",
        }
    }

    /// Ranks actually built for the requested `(r_main, r_sub)`.
    pub fn effective_ranks(self, r_main: usize, r_sub: usize) -> (usize, usize) {
        match self {
            Self::RrqrMainOnly | Self::SvdMajor => (r_main, 0),
            Self::RrqrSubOnly => (0, r_sub),
            Self::RrqrDual | Self::SvdMinor | Self::KaimingUniform => (r_main, r_sub),
        }
    }
}

impl std::str::FromStr for InitStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| domain(format!("unknown init strategy `{s}`")))
    }
}

/// `ΔW = B·A` with `B: d × r`, `A: r × k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    b: Matrix,
    a: Matrix,
    pub lr_multiplier: f64,
    selected_cols: Vec<usize>,
}

impl LoraAdapter {
    /// Assembles an adapter from existing factors, checking shapes and the
    /// selected-column list.
    pub fn from_parts(b: Matrix, a: Matrix, lr_multiplier: f64, selected_cols: Vec<usize>) -> Result<Self> {
        if b.cols() != a.rows() {
            return Err(Error::Shape {
                op: "LoraAdapter",
                expected: format!("b with {} columns", a.rows()),
                got: format!("{}x{}", b.rows(), b.cols()),
            });
        }
        let rank = a.rows();
        if rank > b.rows().min(a.cols()) {
            return Err(domain(format!(
                "adapter rank {rank} exceeds min(d, k) = {}",
                b.rows().min(a.cols())
            )));
        }
        if !(lr_multiplier >= 0.0 && lr_multiplier.is_finite()) {
            return Err(domain(format!(
                "lr multiplier must be nonnegative, got {lr_multiplier}"
            )));
        }
        if !selected_cols.is_empty() {
            if selected_cols.len() != rank {
                return Err(domain(format!(
                    "{} selected columns for an adapter of rank {rank}",
                    selected_cols.len()
                )));
            }
            let mut sorted = selected_cols.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != rank || sorted.last().is_some_and(|&c| c >= a.cols()) {
                return Err(domain("selected columns must be distinct and in range"));
            }
        }
        Ok(Self {
            b,
            a,
            lr_multiplier,
            selected_cols,
        })
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    /// Original column indices targeted by the one-hot rows of `A` at
    /// initialization. Empty for dense initializations.
    pub fn selected_cols(&self) -> &[usize] {
        &self.selected_cols
    }

    /// Mutable row-major views of `(B, A)`; shapes cannot change through them.
    pub fn factors_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        (self.b.as_mut_slice(), self.a.as_mut_slice())
    }

    pub fn delta(&self) -> Matrix {
        self.b.matmul(&self.a).expect("adapter factor shapes agree")
    }

    pub fn param_count(&self) -> usize {
        self.b.rows() * self.b.cols() + self.a.rows() * self.a.cols()
    }

    fn apply(&self, x: &Matrix) -> Matrix {
        let ax = self.a.matmul(x).expect("caller checked shapes");
        self.b.matmul(&ax).expect("adapter factor shapes agree")
    }
}

fn check_factorization(w0: &Matrix, fac: &RrqrFactorization, r: usize, which: &str) -> Result<usize> {
    let (d, k) = w0.shape();
    let m = d.min(k);
    if fac.q.shape() != (d, m) || fac.r.shape() != (m, k) || fac.perm.len() != k {
        return Err(Error::Shape {
            op: "rrqr adapter init",
            expected: format!("factorization of a {d}x{k} matrix"),
            got: format!("q {}x{}, perm of length {}", fac.q.rows(), fac.q.cols(), fac.perm.len()),
        });
    }
    if r == 0 || r > m {
        return Err(domain(format!("{which} rank must be in 1..={m}, got {r}")));
    }
    Ok(m)
}

fn one_hot_rows(k: usize, cols: &[usize]) -> Matrix {
    let mut a = Matrix::zeros(cols.len(), k);
    for (i, &c) in cols.iter().enumerate() {
        a[(i, c)] = 1.0;
    }
    a
}

/// Main adapter from the last `r_main` pivoted directions.
pub fn init_main(w0: &Matrix, fac: &RrqrFactorization, r_main: usize) -> Result<LoraAdapter> {
    let m = check_factorization(w0, fac, r_main, "main")?;
    let selected = fac.perm[m - r_main..m].to_vec();
    Ok(LoraAdapter {
        b: fac.q.column_range(m - r_main, m),
        a: one_hot_rows(w0.cols(), &selected),
        lr_multiplier: DEFAULT_MAIN_LR_MULT,
        selected_cols: selected,
    })
}

/// Sub adapter from the first `r_sub` pivoted directions.
pub fn init_sub(w0: &Matrix, fac: &RrqrFactorization, r_sub: usize) -> Result<LoraAdapter> {
    check_factorization(w0, fac, r_sub, "sub")?;
    let selected = fac.perm[..r_sub].to_vec();
    Ok(LoraAdapter {
        b: fac.q.column_range(0, r_sub),
        a: one_hot_rows(w0.cols(), &selected),
        lr_multiplier: DEFAULT_SUB_LR_MULT,
        selected_cols: selected,
    })
}

/// Adapter from singular triplets `indices`, with `√σ` split between the
/// factors.
fn svd_adapter(fac: &SvdFactorization, indices: std::ops::Range<usize>) -> LoraAdapter {
    let idx: Vec<usize> = indices.collect();
    let roots: Vec<f64> = idx.iter().map(|&i| fac.sigma[i].sqrt()).collect();
    let (d, k) = (fac.u.rows(), fac.v.rows());
    let b = Matrix::from_fn(d, idx.len(), |i, j| fac.u[(i, idx[j])] * roots[j]);
    let a = Matrix::from_fn(idx.len(), k, |i, j| roots[i] * fac.v[(j, idx[i])]);
    LoraAdapter {
        b,
        a,
        lr_multiplier: DEFAULT_MAIN_LR_MULT,
        selected_cols: Vec::new(),
    }
}

fn kaiming_adapter(d: usize, k: usize, r: usize, seed: u64) -> LoraAdapter {
    let bound = (6.0 / k as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = Matrix::from_fn(r, k, |_, _| rng.random_range(-bound..=bound));
    LoraAdapter {
        b: Matrix::zeros(d, r),
        a,
        lr_multiplier: DEFAULT_MAIN_LR_MULT,
        selected_cols: Vec::new(),
    }
}

/// Dense baseline adapter: Kaiming-uniform `A` with zero `B`, or the `r`
/// smallest (`SvdMinor`) / largest (`SvdMajor`) singular triplets of `w0`.
pub fn init_baseline(
    d: usize,
    k: usize,
    r: usize,
    strategy: InitStrategy,
    seed: u64,
    w0: &Matrix,
) -> Result<LoraAdapter> {
    if w0.shape() != (d, k) {
        return Err(Error::Shape {
            op: "init_baseline",
            expected: format!("{d}x{k}"),
            got: format!("{}x{}", w0.rows(), w0.cols()),
        });
    }
    let m = d.min(k);
    if r == 0 || r > m {
        return Err(domain(format!("adapter rank must be in 1..={m}, got {r}")));
    }
    match strategy {
        InitStrategy::KaimingUniform => Ok(kaiming_adapter(d, k, r, seed)),
        InitStrategy::SvdMinor => Ok(svd_adapter(&svd(w0)?, m - r..m)),
        InitStrategy::SvdMajor => Ok(svd_adapter(&svd(w0)?, 0..r)),
        other => Err(domain(format!(
            "{} is not a baseline strategy; build it with init_main/init_sub",
            other.name()
        ))),
    }
}

/// Linear layer `y = (W_res + B_main·A_main + B_sub·A_sub)·x` with a frozen
/// residual.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualAdapterLinear {
    w_original: Matrix,
    w_residual: Matrix,
    main: Option<LoraAdapter>,
    sub: Option<LoraAdapter>,
}

/// Builds an adapted layer for `w0`. The residual absorbs the initial
/// adapter products so the layer's output at construction equals `w0·x`.
pub fn build_dual_layer(
    w0: &Matrix,
    r_main: usize,
    r_sub: usize,
    strategy: InitStrategy,
    seed: u64,
) -> Result<DualAdapterLinear> {
    let (d, k) = w0.shape();
    let m = d.min(k);
    let (r_main, r_sub) = strategy.effective_ranks(r_main, r_sub);
    if r_main == 0 && r_sub == 0 {
        return Err(domain(format!("{} needs a nonzero adapter rank", strategy.name())));
    }
    let disjoint = strategy != InitStrategy::KaimingUniform;
    if disjoint && r_main + r_sub > m {
        return Err(domain(format!(
            "r_main ({r_main}) + r_sub ({r_sub}) exceeds min(d, k) = {m}"
        )));
    }
    if r_main > m || r_sub > m {
        return Err(domain(format!(
            "adapter ranks ({r_main}, {r_sub}) exceed min(d, k) = {m}"
        )));
    }

    let (main, sub) = match strategy {
        InitStrategy::RrqrDual | InitStrategy::RrqrMainOnly | InitStrategy::RrqrSubOnly => {
            let fac = rrqr(w0)?;
            let main = (r_main > 0).then(|| init_main(w0, &fac, r_main)).transpose()?;
            let sub = (r_sub > 0).then(|| init_sub(w0, &fac, r_sub)).transpose()?;
            (main, sub)
        }
        InitStrategy::SvdMinor | InitStrategy::SvdMajor => {
            let fac = svd(w0)?;
            let main = if strategy == InitStrategy::SvdMinor {
                svd_adapter(&fac, m - r_main..m)
            } else {
                svd_adapter(&fac, 0..r_main)
            };
            let sub = (r_sub > 0).then(|| {
                let mut s = svd_adapter(&fac, 0..r_sub);
                s.lr_multiplier = DEFAULT_SUB_LR_MULT;
                s
            });
            (Some(main), sub)
        }
        InitStrategy::KaimingUniform => {
            let main = (r_main > 0).then(|| kaiming_adapter(d, k, r_main, seed));
            let sub = (r_sub > 0).then(|| {
                let mut s = kaiming_adapter(d, k, r_sub, seed ^ SUB_SEED_STREAM);
                s.lr_multiplier = DEFAULT_SUB_LR_MULT;
                s
            });
            (main, sub)
        }
    };

    let mut w_residual = w0.clone();
    for adapter in main.iter().chain(sub.iter()) {
        w_residual = w_residual.sub(&adapter.delta())?;
    }
    Ok(DualAdapterLinear {
        w_original: w0.clone(),
        w_residual,
        main,
        sub,
    })
}

impl DualAdapterLinear {
    /// Reassembles a layer from stored parts, e.g. a loaded checkpoint.
    pub fn from_parts(
        w_original: Matrix,
        w_residual: Matrix,
        main: Option<LoraAdapter>,
        sub: Option<LoraAdapter>,
    ) -> Result<Self> {
        let shape = w_original.shape();
        if w_residual.shape() != shape {
            return Err(Error::Shape {
                op: "DualAdapterLinear",
                expected: format!("residual {}x{}", shape.0, shape.1),
                got: format!("{}x{}", w_residual.rows(), w_residual.cols()),
            });
        }
        for adapter in main.iter().chain(sub.iter()) {
            if (adapter.b.rows(), adapter.a.cols()) != shape {
                return Err(Error::Shape {
                    op: "DualAdapterLinear",
                    expected: format!("adapter product {}x{}", shape.0, shape.1),
                    got: format!("{}x{}", adapter.b.rows(), adapter.a.cols()),
                });
            }
        }
        if let (Some(m), Some(s)) = (&main, &sub) {
            if m.selected_cols.iter().any(|c| s.selected_cols.contains(c)) {
                return Err(domain("main and sub adapters select overlapping columns"));
            }
        }
        Ok(Self {
            w_original,
            w_residual,
            main,
            sub,
        })
    }

    pub fn d_out(&self) -> usize {
        self.w_original.rows()
    }

    pub fn d_in(&self) -> usize {
        self.w_original.cols()
    }

    pub fn w_original(&self) -> &Matrix {
        &self.w_original
    }

    pub fn w_residual(&self) -> &Matrix {
        &self.w_residual
    }

    pub fn main(&self) -> Option<&LoraAdapter> {
        self.main.as_ref()
    }

    pub fn sub(&self) -> Option<&LoraAdapter> {
        self.sub.as_ref()
    }

    /// The only mutation entry point: adapters change, the residual never does.
    pub fn adapters_mut(&mut self) -> (Option<&mut LoraAdapter>, Option<&mut LoraAdapter>) {
        (self.main.as_mut(), self.sub.as_mut())
    }

    pub fn trainable_param_count(&self) -> usize {
        self.main
            .iter()
            .chain(self.sub.iter())
            .map(LoraAdapter::param_count)
            .sum()
    }

    /// `W_res·x + B_main·(A_main·x) + B_sub·(A_sub·x)` for `x: k × n`.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        if x.rows() != self.d_in() {
            return Err(Error::Shape {
                op: "forward",
                expected: format!("input with {} rows", self.d_in()),
                got: format!("{}x{}", x.rows(), x.cols()),
            });
        }
        let mut out = self.w_residual.matmul(x)?;
        for adapter in self.main.iter().chain(self.sub.iter()) {
            out = out.add(&adapter.apply(x))?;
        }
        Ok(out)
    }

    /// Dense `W_res + Σ B·A` for adapter-free inference.
    pub fn merge(&self) -> Matrix {
        let mut merged = self.w_residual.clone();
        for adapter in self.main.iter().chain(self.sub.iter()) {
            merged = merged
                .add(&adapter.delta())
                .expect("adapter product matches residual shape");
        }
        merged
    }
}
