mod common;

use common::{random_matrix, rng};
use rand::Rng;
use rrqr_lora::adapter::{init_baseline, init_main, init_sub};
use rrqr_lora::linalg::rrqr;
use rrqr_lora::{build_dual_layer, InitStrategy, Matrix};

#[test]
fn every_strategy_preserves_output_at_init() {
    let mut g = rng(2024);
    for strategy in InitStrategy::ALL {
        let mut worst = 0.0f64;
        for layer_idx in 0..50 {
            let d = g.random_range(6..=16);
            let k = g.random_range(6..=16);
            let w0 = random_matrix(&mut g, d, k);
            let layer = build_dual_layer(&w0, 3, 2, strategy, layer_idx).unwrap();
            let x = random_matrix(&mut g, k, 100);
            let diff = layer
                .forward(&x)
                .unwrap()
                .max_abs_diff(&w0.matmul(&x).unwrap())
                .unwrap();
            worst = worst.max(diff);
        }
        assert!(worst <= 1e-12, "{}: {worst}", strategy.name());
    }
}

#[test]
fn rrqr_adapters_are_one_hot_at_selected_columns() {
    let mut g = rng(8);
    let w0 = random_matrix(&mut g, 8, 6);
    let fac = rrqr(&w0).unwrap();
    let m = 6;
    let r = 2;
    for (adapter, q_cols) in [
        (init_main(&w0, &fac, r).unwrap(), m - r..m),
        (init_sub(&w0, &fac, r).unwrap(), 0..r),
    ] {
        let positions: Vec<usize> = q_cols.clone().collect();
        let expect_sel: Vec<usize> = positions.iter().map(|&p| fac.perm[p]).collect();
        assert_eq!(adapter.selected_cols(), expect_sel.as_slice());
        for (i, &c) in adapter.selected_cols().iter().enumerate() {
            for j in 0..6 {
                assert_eq!(adapter.a()[(i, j)], if j == c { 1.0 } else { 0.0 });
            }
        }
        let delta = adapter.delta();
        for j in 0..6 {
            let col = delta.column(j);
            match adapter.selected_cols().iter().position(|&c| c == j) {
                Some(i) => {
                    let q = fac.q.column(positions[i]);
                    assert!(col.iter().zip(&q).all(|(a, b)| a.to_bits() == b.to_bits()));
                }
                None => assert!(col.iter().all(|&v| v == 0.0)),
            }
        }
    }
}

#[test]
fn main_and_sub_select_disjoint_columns() {
    let mut g = rng(81);
    for _ in 0..20 {
        let w0 = random_matrix(&mut g, 10, 12);
        let layer = build_dual_layer(&w0, 6, 4, InitStrategy::RrqrDual, 0).unwrap();
        let main = layer.main().unwrap().selected_cols();
        let sub = layer.sub().unwrap().selected_cols();
        assert!(main.iter().all(|c| !sub.contains(c)));
    }
}

#[test]
fn default_ranks_on_a_square_layer_train_73728_parameters() {
    let w0 = Matrix::from_fn(1024, 1024, |i, j| {
        ((i * 31 + j * 17) % 97) as f64 / 97.0 - 0.5 + if i == j { 1.0 } else { 0.0 }
    });
    let layer = build_dual_layer(&w0, 32, 4, InitStrategy::KaimingUniform, 0).unwrap();
    assert_eq!(layer.trainable_param_count(), 73_728);
    assert_eq!(layer.trainable_param_count(), 2 * 1024 * (32 + 4));
}

#[test]
fn rank_sum_violation_is_rejected() {
    let w0 = random_matrix(&mut rng(1), 6, 5);
    for strategy in [InitStrategy::RrqrDual, InitStrategy::SvdMinor] {
        let err = build_dual_layer(&w0, 4, 2, strategy, 0).unwrap_err().to_string();
        assert!(err.contains("exceeds min(d, k) = 5"), "{err}");
    }
    assert!(build_dual_layer(&w0, 5, 0, InitStrategy::RrqrMainOnly, 0).is_ok());
}

#[test]
fn baseline_shapes_and_seeding() {
    let mut g = rng(3);
    let w0 = random_matrix(&mut g, 7, 9);
    let k1 = init_baseline(7, 9, 3, InitStrategy::KaimingUniform, 5, &w0).unwrap();
    let k2 = init_baseline(7, 9, 3, InitStrategy::KaimingUniform, 5, &w0).unwrap();
    assert_eq!(k1, k2);
    assert!(k1.b().is_zero());
    let bound = (6.0f64 / 9.0).sqrt();
    assert!(k1.a().as_slice().iter().all(|v| v.abs() <= bound));

    let major = init_baseline(7, 9, 3, InitStrategy::SvdMajor, 0, &w0).unwrap();
    let minor = init_baseline(7, 9, 3, InitStrategy::SvdMinor, 0, &w0).unwrap();
    assert!(major.delta().frobenius_norm() > minor.delta().frobenius_norm());
    assert!(init_baseline(7, 9, 3, InitStrategy::RrqrDual, 0, &w0).is_err());
}
