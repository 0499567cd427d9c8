//! End-to-end adaptation runs on a [`ToyTask`].

use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::DualMlp;
use super::optim::{poly_lr, AdamWState};
use super::task::ToyTask;
use crate::adapter::{build_dual_layer, InitStrategy, DEFAULT_MAIN_RANK, DEFAULT_SUB_RANK};
use crate::diagnostics::{diagnostics_report, DiagnosticsReport};
use crate::error::{domain, Error, Result};
use crate::linalg::Matrix;

const LAYER_SEED_STRIDE: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub main_lr_mult: f64,
    pub sub_lr_mult: f64,
    pub weight_decay: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub poly_power: f64,
    pub r_main: usize,
    pub r_sub: usize,
    pub strategy: InitStrategy,
    pub seed: u64,
    /// Domain shift used when the task is generated from this config.
    pub shift_strength: f64,
    /// Diagnostics cadence in steps; 0 records only the final state.
    pub snapshot_every: usize,
    /// Datasets larger than this are trained in seeded mini-batches of
    /// `batch_size`; smaller ones use the full batch.
    pub full_batch_threshold: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-4,
            main_lr_mult: 1.0,
            sub_lr_mult: 0.5,
            weight_decay: 0.05,
            iterations: 2000,
            batch_size: 4,
            poly_power: 0.9,
            r_main: DEFAULT_MAIN_RANK,
            r_sub: DEFAULT_SUB_RANK,
            strategy: InitStrategy::RrqrDual,
            seed: 0,
            shift_strength: 1.0,
            snapshot_every: 0,
            full_batch_threshold: 1024,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("base_lr", self.base_lr),
            ("main_lr_mult", self.main_lr_mult),
            ("sub_lr_mult", self.sub_lr_mult),
            ("weight_decay", self.weight_decay),
            ("shift_strength", self.shift_strength),
        ];
        for (name, v) in rates {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(domain(format!("{name} must be nonnegative, got {v}")));
            }
        }
        if self.batch_size == 0 {
            return Err(domain("batch_size must be positive"));
        }
        if !self.poly_power.is_finite() {
            return Err(domain("poly_power must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub step: usize,
    pub diagnostics: DiagnosticsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    /// Training loss before each update; one entry per step.
    pub loss_trajectory: Vec<f64>,
    pub initial_source_loss: f64,
    pub initial_target_loss: f64,
    pub final_source_loss: f64,
    pub final_target_loss: f64,
    pub snapshots: Vec<Snapshot>,
    /// Excluded from serialization so reports stay byte-comparable.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

pub const LAYER_NAMES: [&str; 2] = ["layer0", "layer1"];

/// Seed for the adapters of layer `index` under run seed `seed`.
pub fn layer_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(LAYER_SEED_STRIDE).wrapping_add(index as u64)
}

/// Dual-adapter MLP over the task's pre-trained weights, with the config's
/// ranks, strategy and per-adapter learning-rate multipliers.
pub fn build_model(config: &TrainConfig, task: &ToyTask) -> Result<DualMlp> {
    let layers = task
        .pretrained
        .iter()
        .enumerate()
        .map(|(i, w0)| {
            let mut layer = build_dual_layer(
                w0,
                config.r_main,
                config.r_sub,
                config.strategy,
                layer_seed(config.seed, i),
            )?;
            let (main, sub) = layer.adapters_mut();
            if let Some(m) = main {
                m.lr_multiplier = config.main_lr_mult;
            }
            if let Some(s) = sub {
                s.lr_multiplier = config.sub_lr_mult;
            }
            Ok(layer)
        })
        .collect::<Result<Vec<_>>>()?;
    DualMlp::new(layers)
}

fn snapshot(model: &DualMlp, step: usize) -> Snapshot {
    let names = layer_names(model.layers.len());
    Snapshot {
        step,
        diagnostics: diagnostics_report(names.iter().map(String::as_str).zip(model.layers.iter())),
    }
}

pub fn layer_names(n: usize) -> Vec<String> {
    (0..n)
        .map(|i| {
            LAYER_NAMES
                .get(i)
                .map_or_else(|| format!("layer{i}"), |s| s.to_string())
        })
        .collect()
}

pub fn run_experiment(config: &TrainConfig, task: &ToyTask) -> Result<TrainReport> {
    Ok(run_experiment_with_model(config, task)?.0)
}

/// Trains only the adapter factors on the target domain and returns the
/// report together with the final model.
pub fn run_experiment_with_model(config: &TrainConfig, task: &ToyTask) -> Result<(TrainReport, DualMlp)> {
    config.validate()?;
    let started = Instant::now();
    let mut model = build_model(config, task)?;

    let initial_source_loss = model.loss(&task.source_x, &task.source_y)?;
    let initial_target_loss = model.loss(&task.target_x, &task.target_y)?;

    let mut states: Vec<[Option<(AdamWState, AdamWState)>; 2]> = model
        .layers
        .iter()
        .map(|layer| {
            let st = |a: Option<&crate::adapter::LoraAdapter>| {
                a.map(|a| {
                    (
                        AdamWState::new(a.b().as_slice().len()),
                        AdamWState::new(a.a().as_slice().len()),
                    )
                })
            };
            [st(layer.main()), st(layer.sub())]
        })
        .collect();

    let n = task.target_x.cols();
    let mini_batch = n > config.full_batch_threshold;
    let mut batch_rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut loss_trajectory = Vec::with_capacity(config.iterations);
    let mut snapshots = Vec::new();
    for step in 0..config.iterations {
        if config.snapshot_every > 0 && step % config.snapshot_every == 0 {
            snapshots.push(snapshot(&model, step));
        }
        let (x, y) = if mini_batch {
            let mut idx = sample(&mut batch_rng, n, config.batch_size.min(n)).into_vec();
            idx.sort_unstable();
            (task.target_x.select_columns(&idx), task.target_y.select_columns(&idx))
        } else {
            (task.target_x.clone(), task.target_y.clone())
        };
        let (loss, grads) = model.loss_and_grads(&x, &y)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        loss_trajectory.push(loss);

        let lr = poly_lr(step, config.iterations, config.base_lr, config.poly_power)?;
        for ((layer, g), st) in model.layers.iter_mut().zip(&grads).zip(states.iter_mut()) {
            let (main, sub) = layer.adapters_mut();
            for ((adapter, ag), slot) in [(main, &g.main), (sub, &g.sub)].into_iter().zip(st.iter_mut()) {
                let (Some(adapter), Some(ag), Some((sb, sa))) = (adapter, ag, slot.as_mut()) else {
                    continue;
                };
                let lr_eff = lr * adapter.lr_multiplier;
                let (b, a) = adapter.factors_mut();
                sb.step(b, ag.b.as_slice(), lr_eff, config.weight_decay)?;
                sa.step(a, ag.a.as_slice(), lr_eff, config.weight_decay)?;
            }
        }
    }

    let final_source_loss = model.loss(&task.source_x, &task.source_y)?;
    let final_target_loss = model.loss(&task.target_x, &task.target_y)?;
    if !final_target_loss.is_finite() {
        return Err(Error::Divergence {
            step: config.iterations,
            loss: final_target_loss,
        });
    }
    snapshots.push(snapshot(&model, config.iterations));

    let report = TrainReport {
        config: config.clone(),
        loss_trajectory,
        initial_source_loss,
        initial_target_loss,
        final_source_loss,
        final_target_loss,
        snapshots,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    Ok((report, model))
}

/// Probes `n_probes` seeded random inputs and returns the largest absolute
/// difference between adapter and merged forward passes.
pub fn merge_probe_error(model: &DualMlp, n_probes: usize, seed: u64) -> Result<f64> {
    use rand::Rng;
    let d_in = model.layers.first().ok_or_else(|| domain("empty model"))?.d_in();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Matrix::from_fn(d_in, n_probes, |_, _| rng.random_range(-1.0..1.0));
    let a = model.forward(&x)?;
    let b = model.forward_merged(&x)?;
    Ok(a.max_abs_diff(&b).expect("same output shape"))
}
