mod common;

use common::{random_matrix, rng};
use rrqr_lora::train::{
    backward, check_layer_gradients, finite_diff_check, flatten_grads, gen_toy_task, gen_toy_task_with,
    merge_probe_error, run_experiment, run_experiment_with_model, DualMlp, FdOptions, HalfSquaredLoss, LinearLoss,
    TaskConfig, TrainConfig,
};
use rrqr_lora::{build_dual_layer, InitStrategy, Matrix};

fn small_task() -> TaskConfig {
    TaskConfig {
        dim: 12,
        hidden: 10,
        n_samples: 24,
        pretrain_steps: 20,
        ..TaskConfig::default()
    }
}

fn small_config(iterations: usize) -> TrainConfig {
    TrainConfig {
        iterations,
        r_main: 3,
        r_sub: 2,
        base_lr: 1e-3,
        ..TrainConfig::default()
    }
}

/// Moves every adapter factor off its initial value so B and A are both dense.
fn perturbed_mlp(seed: u64) -> DualMlp {
    let mut g = rng(seed);
    let layers = [(7, 5), (4, 7)]
        .iter()
        .enumerate()
        .map(|(i, &(d, k))| {
            let w0 = random_matrix(&mut g, d, k);
            let mut layer = build_dual_layer(&w0, 2, 1, InitStrategy::RrqrDual, i as u64).unwrap();
            let (main, sub) = layer.adapters_mut();
            for adapter in main.into_iter().chain(sub) {
                let (b, a) = adapter.factors_mut();
                for v in b.iter_mut().chain(a.iter_mut()) {
                    *v += 0.3 * rand::Rng::random_range(&mut g, -1.0..1.0);
                }
            }
            layer
        })
        .collect();
    DualMlp::new(layers).unwrap()
}

#[test]
fn layer_gradients_match_finite_differences() {
    let mut g = rng(12);
    let w0 = random_matrix(&mut g, 6, 5);
    let mut layer = build_dual_layer(&w0, 2, 2, InitStrategy::KaimingUniform, 4).unwrap();
    let (main, sub) = layer.adapters_mut();
    for adapter in main.into_iter().chain(sub) {
        for v in adapter.factors_mut().0 {
            *v = rand::Rng::random_range(&mut g, -1.0..1.0);
        }
    }
    let x = random_matrix(&mut g, 5, 3);
    let lin = LinearLoss(random_matrix(&mut g, 6, 3));
    // a linear loss is quadratic in the factors; central differences are exact
    // up to rounding
    let report = check_layer_gradients(&layer, &x, &lin, 1e-3, 1e-9).unwrap();
    assert!(report.passed, "{report:?}");
    let sq = HalfSquaredLoss(random_matrix(&mut g, 6, 3));
    let report = check_layer_gradients(&layer, &x, &sq, 1e-5, 1e-6).unwrap();
    assert!(report.passed, "{report:?}");
    assert_eq!(report.checked, layer.trainable_param_count());
}

#[test]
fn input_gradient_matches_dense_transpose() {
    let mut g = rng(13);
    let w0 = random_matrix(&mut g, 6, 5);
    let layer = build_dual_layer(&w0, 2, 1, InitStrategy::SvdMinor, 0).unwrap();
    let x = random_matrix(&mut g, 5, 4);
    let up = random_matrix(&mut g, 6, 4);
    let gx = backward(&layer, &x, &up).unwrap().x.unwrap();
    let oracle = layer.merge().t_matmul(&up).unwrap();
    assert!(gx.max_abs_diff(&oracle).unwrap() <= 1e-12);
}

#[test]
fn mlp_gradients_match_finite_differences_and_corruption_fails() {
    let mut model = perturbed_mlp(99);
    let mut g = rng(100);
    let x = random_matrix(&mut g, 5, 6);
    let y = random_matrix(&mut g, 4, 6);
    let (_, grads) = model.loss_and_grads(&x, &y).unwrap();
    let analytic = flatten_grads(&grads);
    let loss = |m: &DualMlp| m.loss(&x, &y).unwrap();

    let report = finite_diff_check(&mut model, loss, &analytic, 1e-5, 1e-6, FdOptions::default());
    assert!(report.passed, "{report:?}");

    let corrupted: Vec<f64> = analytic.iter().map(|v| v * 1.01).collect();
    let bad = finite_diff_check(&mut model, loss, &corrupted, 1e-5, 1e-6, FdOptions::default());
    assert!(!bad.passed, "{bad:?}");
}

#[test]
fn forward_after_updates_matches_dense_assembly() {
    let model = perturbed_mlp(7);
    let x = random_matrix(&mut rng(8), 5, 10);
    // textbook dense oracle: W_res + Σ B·A assembled entry by entry
    let mut h = x.clone();
    for (i, layer) in model.layers.iter().enumerate() {
        let dense = Matrix::from_fn(layer.d_out(), layer.d_in(), |r, c| {
            let mut v = layer.w_residual()[(r, c)];
            for a in layer.main().into_iter().chain(layer.sub()) {
                v += (0..a.rank()).map(|t| a.b()[(r, t)] * a.a()[(t, c)]).sum::<f64>();
            }
            v
        });
        h = dense.matmul(&h).unwrap();
        if i + 1 < model.layers.len() {
            h = h.map(f64::tanh);
        }
    }
    assert!(model.forward(&x).unwrap().max_abs_diff(&h).unwrap() <= 1e-10);
    assert!(merge_probe_error(&model, 100, 3).unwrap() <= 1e-10);
}

#[test]
fn toy_task_has_a_domain_gap() {
    for seed in 0..3 {
        let task = gen_toy_task_with(seed, 1.0, &small_task()).unwrap();
        let (src, tgt) = task.pretrained_losses().unwrap();
        assert!(tgt >= 2.0 * src, "seed {seed}: source {src}, target {tgt}");
    }
    let task = gen_toy_task(0, 1.0).unwrap();
    let (src, tgt) = task.pretrained_losses().unwrap();
    assert!(tgt >= 2.0 * src);
}

#[test]
fn zero_iterations_leave_losses_unchanged() {
    let task = gen_toy_task_with(4, 1.0, &small_task()).unwrap();
    let report = run_experiment(&small_config(0), &task).unwrap();
    assert!(report.loss_trajectory.is_empty());
    assert_eq!(report.final_target_loss, report.initial_target_loss);
    assert_eq!(report.final_source_loss, report.initial_source_loss);
    assert_eq!(report.snapshots.len(), 1);
}

#[test]
fn runs_are_deterministic_and_reduce_target_loss() {
    let task = gen_toy_task_with(5, 1.0, &small_task()).unwrap();
    let cfg = TrainConfig {
        snapshot_every: 50,
        ..small_config(200)
    };
    let (a, model_a) = run_experiment_with_model(&cfg, &task).unwrap();
    let (b, model_b) = run_experiment_with_model(&cfg, &task).unwrap();
    assert_eq!(a.loss_trajectory, b.loss_trajectory);
    assert_eq!(a.snapshots, b.snapshots);
    assert_eq!(model_a, model_b);
    assert!(a.final_target_loss < a.initial_target_loss);
    assert_eq!(a.snapshots.len(), 5);
}

#[test]
fn residual_stays_frozen_during_training() {
    let task = gen_toy_task_with(6, 1.0, &small_task()).unwrap();
    let cfg = small_config(100);
    let initial = rrqr_lora::train::build_model(&cfg, &task).unwrap();
    let (_, trained) = run_experiment_with_model(&cfg, &task).unwrap();
    for (before, after) in initial.layers.iter().zip(&trained.layers) {
        let bits = |m: &Matrix| m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(before.w_residual()), bits(after.w_residual()));
        assert_eq!(bits(before.w_original()), bits(after.w_original()));
        assert_ne!(before.main().unwrap().a(), after.main().unwrap().a());
    }
}

// In the first Adam step every entry with a nonzero gradient moves by about
// lr_eff, so the per-group step sizes expose the learning-rate multipliers.
#[test]
fn sub_adapter_steps_at_half_the_main_rate() {
    let task = gen_toy_task_with(7, 1.0, &small_task()).unwrap();
    let cfg = TrainConfig {
        weight_decay: 0.0,
        ..small_config(1)
    };
    let initial = rrqr_lora::train::build_model(&cfg, &task).unwrap();
    let (_, trained) = run_experiment_with_model(&cfg, &task).unwrap();
    let max_step = |before: &Matrix, after: &Matrix| before.max_abs_diff(after).unwrap();
    let layer0 = (&initial.layers[0], &trained.layers[0]);
    let main = max_step(layer0.0.main().unwrap().b(), layer0.1.main().unwrap().b());
    let sub = max_step(layer0.0.sub().unwrap().b(), layer0.1.sub().unwrap().b());
    assert!((main / sub - 2.0).abs() < 1e-3, "main {main}, sub {sub}");
}

#[test]
fn unknown_config_keys_are_rejected() {
    let err = serde_json::from_str::<TrainConfig>(r#"{"iterations": 3, "learning_rate": 1}"#).unwrap_err();
    assert!(err.to_string().contains("learning_rate"));
}
