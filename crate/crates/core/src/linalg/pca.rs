use serde::{Deserialize, Serialize};

use super::{svd, Matrix};
use crate::error::{domain, Result};

/// Principal components of a `samples × features` matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pca {
    /// `samples × n_components` coordinates of the centered data.
    pub scores: Matrix,
    /// `features × n_components`, orthonormal columns.
    pub components: Matrix,
    /// Variance along each component (`σ² / (samples − 1)`), nonincreasing.
    pub explained_variance: Vec<f64>,
    /// Total variance of the centered data across all directions.
    pub total_variance: f64,
}

impl Pca {
    /// Fraction of the total variance carried by each component; zeros when
    /// the data has no variance at all.
    pub fn explained_variance_ratio(&self) -> Vec<f64> {
        if self.total_variance == 0.0 {
            return vec![0.0; self.explained_variance.len()];
        }
        self.explained_variance
            .iter()
            .map(|v| v / self.total_variance)
            .collect()
    }
}

/// Projects row-mean-centered `x` onto its top `n_components` right singular
/// vectors. Each component's sign is fixed so its largest-magnitude entry is
/// positive.
pub fn pca_project(x: &Matrix, n_components: usize) -> Result<Pca> {
    let (n, f) = x.shape();
    if n < 2 {
        return Err(domain(format!("pca needs at least 2 samples, got {n}")));
    }
    if n_components == 0 || n_components > (n - 1).min(f) {
        return Err(domain(format!(
            "n_components must be in 1..={}, got {n_components}",
            (n - 1).min(f)
        )));
    }

    let mut means = vec![0.0; f];
    for i in 0..n {
        for (m, v) in means.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    for m in &mut means {
        *m /= n as f64;
    }
    let centered = Matrix::from_fn(n, f, |i, j| x[(i, j)] - means[j]);

    let fac = svd(&centered)?;
    let mut components = fac.v.column_range(0, n_components);
    for c in 0..n_components {
        let col = components.column(c);
        let lead = col.iter().enumerate().fold(
            (0, 0.0f64),
            |acc, (i, v)| if v.abs() > acc.1.abs() { (i, *v) } else { acc },
        );
        if lead.1 < 0.0 {
            for i in 0..f {
                components[(i, c)] = -components[(i, c)];
            }
        }
    }
    let scores = centered.matmul(&components)?;
    let denom = (n - 1) as f64;
    let explained_variance = fac.sigma[..n_components].iter().map(|s| s * s / denom).collect();
    let total_variance = fac.sigma.iter().map(|s| s * s).sum::<f64>() / denom;
    Ok(Pca {
        scores,
        components,
        explained_variance,
        total_variance,
    })
}
