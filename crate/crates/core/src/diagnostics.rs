//! Adapter diagnostics: effective rank, subspace similarity between the main
//! and sub adapters, cosine structure of the factors, selected-column norm
//! statistics and PCA of feature deltas.

use serde::{Deserialize, Serialize};

use crate::adapter::{DualAdapterLinear, LoraAdapter};
use crate::error::{domain, Result};
use crate::linalg::{dot, norm, pca_project, svd, Matrix};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// `exp` of the Shannon entropy of the normalized singular values.
pub fn effective_rank(w: &Matrix) -> Result<f64> {
    effective_rank_from_spectrum(&svd(w)?.sigma)
}

pub fn effective_rank_from_spectrum(sigma: &[f64]) -> Result<f64> {
    let total: f64 = sigma.iter().sum();
    if total <= 0.0 {
        return Err(domain("effective rank of a zero matrix is undefined"));
    }
    let entropy: f64 = sigma
        .iter()
        .map(|&s| s / total)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum();
    Ok(entropy.exp())
}

/// Effective rank per unit of target rank. Panics if `target_rank` is zero.
pub fn rank_efficiency(erank: f64, target_rank: usize) -> f64 {
    assert!(target_rank >= 1, "target rank must be positive");
    erank / target_rank as f64
}

fn row_space_basis(a: &Matrix) -> Result<Matrix> {
    if a.is_zero() {
        return Err(domain("subspace similarity of a zero matrix is undefined"));
    }
    let f = svd(a)?;
    // drop directions with numerically zero singular values
    let tol = f.sigma[0] * a.rows().max(a.cols()) as f64 * f64::EPSILON;
    let keep: Vec<usize> = (0..f.sigma.len()).filter(|&i| f.sigma[i] > tol).collect();
    Ok(f.v.select_columns(&keep))
}

/// `‖V_mainᵀ·V_sub‖_F² / min(r_main, r_sub)` over orthonormal bases of the
/// row spaces of the two `A` factors. 1 for identical subspaces, 0 for
/// orthogonal ones.
pub fn grassmann_similarity(a_main: &Matrix, a_sub: &Matrix) -> Result<f64> {
    if a_main.cols() != a_sub.cols() {
        return Err(domain(format!(
            "adapters must share the input dimension, got {} and {}",
            a_main.cols(),
            a_sub.cols()
        )));
    }
    let v_main = row_space_basis(a_main)?;
    let v_sub = row_space_basis(a_sub)?;
    let overlap = v_main.t_matmul(&v_sub)?;
    let fro2: f64 = overlap.as_slice().iter().map(|v| v * v).sum();
    Ok(fro2 / a_main.rows().min(a_sub.rows()) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineStructure {
    pub heatmap: Matrix,
    pub mean_offdiag_abs: f64,
    /// Indices of zero vectors; their rows and columns of the heatmap are 0.
    pub zero_vectors: Vec<usize>,
}

/// Pairwise cosine similarity between the rows or columns of `m`.
pub fn cosine_structure(m: &Matrix, axis: Axis) -> Result<CosineStructure> {
    let vectors: Vec<Vec<f64>> = match axis {
        Axis::Rows => (0..m.rows()).map(|i| m.row(i).to_vec()).collect(),
        Axis::Cols => m.columns(),
    };
    let n = vectors.len();
    if n < 2 {
        return Err(domain(format!("cosine structure needs at least 2 vectors, got {n}")));
    }
    let norms: Vec<f64> = vectors.iter().map(|v| norm(v)).collect();
    let zero_vectors: Vec<usize> = (0..n).filter(|&i| norms[i] == 0.0).collect();

    let mut heatmap = Matrix::zeros(n, n);
    let mut off_sum = 0.0;
    for i in 0..n {
        for j in i..n {
            let c = if norms[i] == 0.0 || norms[j] == 0.0 {
                0.0
            } else if i == j {
                1.0
            } else {
                (dot(&vectors[i], &vectors[j]) / (norms[i] * norms[j])).clamp(-1.0, 1.0)
            };
            heatmap[(i, j)] = c;
            heatmap[(j, i)] = c;
            if i != j {
                off_sum += 2.0 * c.abs();
            }
        }
    }
    Ok(CosineStructure {
        heatmap,
        mean_offdiag_abs: off_sum / (n * (n - 1)) as f64,
        zero_vectors,
    })
}

/// Column-norm comparison between selected and non-selected columns of a
/// trained `A`. Ratios are `None` when the non-selected mean is zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean_selected: f64,
    pub mean_nonselected: f64,
    pub avg_ratio: Option<f64>,
    pub max_ratio: Option<f64>,
}

pub fn column_norm_stats(a_trained: &Matrix, selected_cols: &[usize]) -> Result<NormStats> {
    let k = a_trained.cols();
    if selected_cols.is_empty() {
        return Err(domain("no selected columns"));
    }
    let mut is_selected = vec![false; k];
    for &c in selected_cols {
        if c >= k || is_selected[c] {
            return Err(domain(format!("selected column {c} is out of range or repeated")));
        }
        is_selected[c] = true;
    }
    if selected_cols.len() >= k {
        return Err(domain("every column is selected; the complement is empty"));
    }
    let mut sums = [0.0, 0.0];
    for (j, &sel) in is_selected.iter().enumerate() {
        sums[usize::from(sel)] += norm(&a_trained.column(j));
    }
    let mean_selected = sums[1] / selected_cols.len() as f64;
    let mean_nonselected = sums[0] / (k - selected_cols.len()) as f64;
    let ratio = (mean_nonselected > 0.0).then(|| mean_selected / mean_nonselected);
    Ok(NormStats {
        mean_selected,
        mean_nonselected,
        avg_ratio: ratio,
        max_ratio: ratio,
    })
}

/// Combines per-layer statistics: means of the per-layer means and ratios,
/// maximum of the per-layer ratios.
pub fn aggregate_norm_stats(per_layer: &[NormStats]) -> Option<NormStats> {
    if per_layer.is_empty() {
        return None;
    }
    let n = per_layer.len() as f64;
    let ratios: Vec<f64> = per_layer.iter().filter_map(|s| s.avg_ratio).collect();
    let maxes: Vec<f64> = per_layer.iter().filter_map(|s| s.max_ratio).collect();
    Some(NormStats {
        mean_selected: per_layer.iter().map(|s| s.mean_selected).sum::<f64>() / n,
        mean_nonselected: per_layer.iter().map(|s| s.mean_nonselected).sum::<f64>() / n,
        avg_ratio: mean(&ratios),
        max_ratio: maxes.into_iter().reduce(f64::max),
    })
}

/// PCA scores of `f_after − f_before` (tokens × features).
pub fn feature_delta_pca(f_before: &Matrix, f_after: &Matrix, n_components: usize) -> Result<Matrix> {
    let delta = f_after.sub(f_before)?;
    Ok(pca_project(&delta, n_components)?.scores)
}

/// Metrics for one adapted layer. Fields are `None` where the metric is
/// undefined (zero update, single-vector factor, missing sub adapter, …).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDiagnostics {
    pub layer_id: String,
    pub effective_rank: Option<f64>,
    pub rank_efficiency: Option<f64>,
    pub phi: Option<f64>,
    pub mean_offdiag_cos_a: Option<f64>,
    pub mean_offdiag_cos_b: Option<f64>,
    pub norm_stats: Option<NormStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateDiagnostics {
    pub effective_rank: Option<f64>,
    pub rank_efficiency: Option<f64>,
    pub phi: Option<f64>,
    pub mean_offdiag_cos_a: Option<f64>,
    pub mean_offdiag_cos_b: Option<f64>,
    pub norm_stats: Option<NormStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub schema_version: u32,
    pub layers: Vec<LayerDiagnostics>,
    pub aggregate: AggregateDiagnostics,
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Diagnostics for a layer's primary adapter (main, or sub when there is no
/// main), plus `phi` when both adapters are present.
pub fn layer_diagnostics(layer_id: &str, layer: &DualAdapterLinear) -> LayerDiagnostics {
    let primary: Option<&LoraAdapter> = layer.main().or(layer.sub());
    let effective_rank = primary.and_then(|p| effective_rank(&p.delta()).ok());
    let rank_efficiency = primary.zip(effective_rank).map(|(p, e)| rank_efficiency(e, p.rank()));
    let phi = match (layer.main(), layer.sub()) {
        (Some(m), Some(s)) => grassmann_similarity(m.a(), s.a()).ok(),
        _ => None,
    };
    let cos = |m: &Matrix, axis| cosine_structure(m, axis).ok().map(|c| c.mean_offdiag_abs);
    let norm_stats = primary
        .filter(|p| !p.selected_cols().is_empty())
        .and_then(|p| column_norm_stats(p.a(), p.selected_cols()).ok());
    LayerDiagnostics {
        layer_id: layer_id.to_string(),
        effective_rank,
        rank_efficiency,
        phi,
        mean_offdiag_cos_a: primary.and_then(|p| cos(p.a(), Axis::Rows)),
        mean_offdiag_cos_b: primary.and_then(|p| cos(p.b(), Axis::Cols)),
        norm_stats,
    }
}

/// Report over named layers, kept in the order given.
pub fn diagnostics_report<'a, I>(layers: I) -> DiagnosticsReport
where
    I: IntoIterator<Item = (&'a str, &'a DualAdapterLinear)>,
{
    let layers: Vec<LayerDiagnostics> = layers
        .into_iter()
        .map(|(id, layer)| layer_diagnostics(id, layer))
        .collect();
    report_from_layers(layers)
}

/// Aggregates already computed per-layer records.
pub fn report_from_layers(layers: Vec<LayerDiagnostics>) -> DiagnosticsReport {
    let collect = |f: fn(&LayerDiagnostics) -> Option<f64>| -> Option<f64> {
        mean(&layers.iter().filter_map(f).collect::<Vec<_>>())
    };
    let norms: Vec<NormStats> = layers.iter().filter_map(|l| l.norm_stats).collect();
    let aggregate = AggregateDiagnostics {
        effective_rank: collect(|l| l.effective_rank),
        rank_efficiency: collect(|l| l.rank_efficiency),
        phi: collect(|l| l.phi),
        mean_offdiag_cos_a: collect(|l| l.mean_offdiag_cos_a),
        mean_offdiag_cos_b: collect(|l| l.mean_offdiag_cos_b),
        norm_stats: aggregate_norm_stats(&norms),
    };
    DiagnosticsReport {
        schema_version: REPORT_SCHEMA_VERSION,
        layers,
        aggregate,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::{build_dual_layer, InitStrategy};

    #[test]
    fn effective_rank_trivial_spectra() {
        assert!((effective_rank(&Matrix::identity(5)).unwrap() - 5.0).abs() < 1e-9);
        let rank1 = Matrix::from_fn(4, 3, |i, j| (i as f64 + 1.0) * (j as f64 - 0.5));
        assert!((effective_rank(&rank1).unwrap() - 1.0).abs() < 1e-9);
        assert!(effective_rank(&Matrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn effective_rank_three_one() {
        // hand entropy: p = (3/4, 1/4)
        let h = -(0.75f64 * 0.75f64.ln() + 0.25 * 0.25f64.ln());
        assert!((h - 0.562335).abs() < 1e-6);
        let e = effective_rank(&Matrix::diag(&[3.0, 1.0])).unwrap();
        assert!((e - h.exp()).abs() < 1e-12);
        assert!((e - 1.754765).abs() < 1e-5);
    }

    #[test]
    fn rank_efficiency_values() {
        assert!((rank_efficiency(13.60, 16) - 0.850).abs() < 1e-12);
        assert_eq!(format!("{:.3}", rank_efficiency(24.65, 32)), "0.770");
        assert_eq!(rank_efficiency(16.0, 16), 1.0);
    }

    #[test]
    fn grassmann_extremes() {
        let a = Matrix::from_fn(3, 6, |i, j| ((i * 7 + j * 5) % 9) as f64 - 4.0);
        assert!((grassmann_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        let e12 = Matrix::from_rows(&[[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]]).unwrap();
        let e3 = Matrix::from_rows(&[[0.0, 0.0, 1.0, 0.0]]).unwrap();
        assert!(grassmann_similarity(&e12, &e3).unwrap().abs() < 1e-12);
        assert!(grassmann_similarity(&e12, &Matrix::zeros(1, 4)).is_err());
        assert!(grassmann_similarity(&e12, &Matrix::zeros(1, 3)).is_err());
    }

    #[test]
    fn cosine_orthonormal_and_duplicates() {
        let c = cosine_structure(&Matrix::identity(4), Axis::Rows).unwrap();
        assert_eq!(c.heatmap, Matrix::identity(4));
        assert_eq!(c.mean_offdiag_abs, 0.0);
        let dup = Matrix::from_rows(&[[1.0, 2.0, 3.0], [1.0, 2.0, 3.0], [1.0, 2.0, 3.0]]).unwrap();
        let c = cosine_structure(&dup, Axis::Rows).unwrap();
        assert!(c.heatmap.as_slice().iter().all(|&v| (v - 1.0).abs() < 1e-15));
        assert!((c.mean_offdiag_abs - 1.0).abs() < 1e-15);
        assert!(cosine_structure(&Matrix::zeros(1, 3), Axis::Rows).is_err());
    }

    #[test]
    fn cosine_zero_vectors_flagged() {
        let m = Matrix::from_rows(&[[1.0, 0.0], [0.0, 0.0], [1.0, 1.0]]).unwrap();
        let c = cosine_structure(&m, Axis::Rows).unwrap();
        assert_eq!(c.zero_vectors, vec![1]);
        assert_eq!(c.heatmap[(1, 1)], 0.0);
        assert_eq!(c.heatmap[(0, 1)], 0.0);
        let cols = cosine_structure(&m, Axis::Cols).unwrap();
        assert!(cols.zero_vectors.is_empty());
    }

    #[test]
    fn norm_stats_ratios() {
        let a = Matrix::from_fn(3, 4, |_, _| 1.0);
        let s = column_norm_stats(&a, &[1]).unwrap();
        assert!((s.avg_ratio.unwrap() - 1.0).abs() < 1e-15);
        let scaled = Matrix::from_fn(3, 4, |_, j| if j == 0 || j == 2 { 2.0 } else { 1.0 });
        let s = column_norm_stats(&scaled, &[0, 2]).unwrap();
        assert!((s.avg_ratio.unwrap() - 2.0).abs() < 1e-15);
        assert!(column_norm_stats(&a, &[]).is_err());
        assert!(column_norm_stats(&a, &[0, 1, 2, 3]).is_err());
        assert!(column_norm_stats(&a, &[4]).is_err());
        assert!(column_norm_stats(&a, &[1, 1]).is_err());

        let one_hot = Matrix::from_rows(&[[0.0, 1.0, 0.0]]).unwrap();
        assert_eq!(column_norm_stats(&one_hot, &[1]).unwrap().avg_ratio, None);
    }

    #[test]
    fn norm_stats_aggregate() {
        let s = |r: f64| NormStats {
            mean_selected: r,
            mean_nonselected: 1.0,
            avg_ratio: Some(r),
            max_ratio: Some(r),
        };
        let agg = aggregate_norm_stats(&[s(1.0), s(2.0), s(1.5)]).unwrap();
        assert!((agg.avg_ratio.unwrap() - 1.5).abs() < 1e-15);
        assert_eq!(agg.max_ratio, Some(2.0));
        assert!(aggregate_norm_stats(&[]).is_none());
    }

    #[test]
    fn feature_delta_pca_cases() {
        let f = Matrix::from_fn(5, 3, |i, j| (i * j) as f64);
        assert!(feature_delta_pca(&f, &f, 2).unwrap().is_zero());
        assert!(feature_delta_pca(&f, &Matrix::zeros(5, 4), 1).is_err());
        let rank1 = f
            .add(&Matrix::from_fn(5, 3, |i, j| (i as f64 - 2.0) * (1.0 + j as f64)))
            .unwrap();
        let pca = pca_project(&rank1.sub(&f).unwrap(), 2).unwrap();
        assert!((pca.explained_variance_ratio()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fresh_rrqr_layer_report() {
        let w0 = Matrix::from_fn(8, 8, |i, j| ((i * 13 + j * 7) % 17) as f64 * 0.25 - 2.0);
        let layer = build_dual_layer(&w0, 3, 2, InitStrategy::RrqrDual, 0).unwrap();
        let d = layer_diagnostics("l0", &layer);
        assert_eq!(d.mean_offdiag_cos_a, Some(0.0));
        assert_eq!(d.phi, Some(0.0));
        assert!((d.effective_rank.unwrap() - 3.0).abs() < 1e-9);
        assert!(d.mean_offdiag_cos_b.unwrap() < 1e-12);
        assert_eq!(d.norm_stats.unwrap().avg_ratio, None);

        let kaiming = build_dual_layer(&w0, 3, 2, InitStrategy::KaimingUniform, 0).unwrap();
        let d = layer_diagnostics("l1", &kaiming);
        assert_eq!(d.effective_rank, None);
        assert!(d.norm_stats.is_none());
        assert!(d.phi.is_some());

        let report = diagnostics_report([("l0", &layer), ("l1", &kaiming)]);
        assert_eq!(report.layers.len(), 2);
        assert!((report.aggregate.effective_rank.unwrap() - 3.0).abs() < 1e-9);
    }
}
