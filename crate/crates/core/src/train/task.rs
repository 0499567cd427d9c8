//! Synthetic source/target regression task.
//!
//! A seeded two-layer tanh teacher defines the source domain. The target
//! domain rotates the inputs in consecutive coordinate planes by an angle
//! proportional to the shift strength and labels them with a perturbed copy
//! of the teacher. The "pre-trained" weights come from a short dense fit of
//! a noisy teacher copy on the source data.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::model::half_mse;
use super::optim::AdamWState;
use crate::error::{domain, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub dim: usize,
    pub hidden: usize,
    pub n_samples: usize,
    /// Per-coordinate input scales are drawn uniformly from this range.
    pub input_scale: (f64, f64),
    /// Rotation angle per unit of shift strength, in radians.
    pub rotation_per_shift: f64,
    /// Teacher weight perturbation per unit of shift strength.
    pub perturbation: f64,
    pub pretrain_noise: f64,
    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            hidden: 64,
            n_samples: 128,
            input_scale: (0.3, 1.5),
            rotation_per_shift: PI / 6.0,
            perturbation: 0.6,
            pretrain_noise: 0.05,
            pretrain_steps: 100,
            pretrain_lr: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyTask {
    pub seed: u64,
    pub shift_strength: f64,
    pub rotation: f64,
    /// `[hidden × dim, dim × hidden]`.
    pub teacher: Vec<Matrix>,
    /// Dense weights after the source fit; the starting point for adaptation.
    pub pretrained: Vec<Matrix>,
    /// Samples are columns.
    pub source_x: Matrix,
    pub source_y: Matrix,
    pub target_x: Matrix,
    pub target_y: Matrix,
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

/// Gaussian weights with per-column scales, so column norms are uneven.
fn structured_weight(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let scales: Vec<f64> = (0..cols)
        .map(|_| {
            let u: f64 = rng.random();
            0.25 + 1.75 * u * u
        })
        .collect();
    let base = 1.0 / (cols as f64).sqrt();
    let g = gaussian(rng, rows, cols, base);
    Matrix::from_fn(rows, cols, |i, j| g[(i, j)] * scales[j])
}

/// Dense two-layer tanh network `w2·tanh(w1·x)`.
pub fn dense_forward(weights: &[Matrix], x: &Matrix) -> Result<Matrix> {
    let h = weights[0].matmul(x)?.map(f64::tanh);
    weights[1].matmul(&h)
}

fn rotate_planes(x: &Matrix, angle: f64) -> Matrix {
    let (c, s) = (angle.cos(), angle.sin());
    let mut out = x.clone();
    let mut i = 0;
    while i + 1 < x.rows() {
        for j in 0..x.cols() {
            let (a, b) = (x[(i, j)], x[(i + 1, j)]);
            out[(i, j)] = c * a - s * b;
            out[(i + 1, j)] = s * a + c * b;
        }
        i += 2;
    }
    out
}

fn dense_fit(start: &[Matrix], x: &Matrix, y: &Matrix, steps: usize, lr: f64) -> Result<Vec<Matrix>> {
    let mut w = start.to_vec();
    let mut states: Vec<AdamWState> = w.iter().map(|m| AdamWState::new(m.as_slice().len())).collect();
    for _ in 0..steps {
        let z = w[0].matmul(x)?;
        let h = z.map(f64::tanh);
        let out = w[1].matmul(&h)?;
        let (_, up) = half_mse(&out, y)?;
        let g1 = up.matmul_t(&h)?;
        let gh = w[1].t_matmul(&up)?;
        let gz = Matrix::from_fn(gh.rows(), gh.cols(), |i, j| gh[(i, j)] * (1.0 - h[(i, j)] * h[(i, j)]));
        let g0 = gz.matmul_t(x)?;
        states[0].step(w[0].as_mut_slice(), g0.as_slice(), lr, 0.0)?;
        states[1].step(w[1].as_mut_slice(), g1.as_slice(), lr, 0.0)?;
    }
    Ok(w)
}

pub fn gen_toy_task(seed: u64, shift_strength: f64) -> Result<ToyTask> {
    gen_toy_task_with(seed, shift_strength, &TaskConfig::default())
}

pub fn gen_toy_task_with(seed: u64, shift_strength: f64, cfg: &TaskConfig) -> Result<ToyTask> {
    if !(shift_strength >= 0.0 && shift_strength.is_finite()) {
        return Err(domain(format!(
            "shift strength must be nonnegative, got {shift_strength}"
        )));
    }
    if cfg.dim == 0 || cfg.hidden == 0 || cfg.n_samples < 2 {
        return Err(domain("task needs positive dimensions and at least 2 samples"));
    }
    let (dim, hidden, n) = (cfg.dim, cfg.hidden, cfg.n_samples);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let teacher = vec![
        structured_weight(&mut rng, hidden, dim),
        structured_weight(&mut rng, dim, hidden),
    ];
    let scales: Vec<f64> = (0..dim)
        .map(|_| rng.random_range(cfg.input_scale.0..=cfg.input_scale.1))
        .collect();
    let z = gaussian(&mut rng, dim, n, 1.0);
    let source_x = Matrix::from_fn(dim, n, |i, j| z[(i, j)] * scales[i]);
    let source_y = dense_forward(&teacher, &source_x)?;

    let eps = shift_strength * cfg.perturbation;
    let pert = [
        gaussian(&mut rng, hidden, dim, 1.0 / (dim as f64).sqrt()),
        gaussian(&mut rng, dim, hidden, 1.0 / (hidden as f64).sqrt()),
    ];
    let shifted: Vec<Matrix> = teacher
        .iter()
        .zip(&pert)
        .map(|(w, e)| w.add(&e.scale(eps)))
        .collect::<Result<_>>()?;
    let rotation = shift_strength * cfg.rotation_per_shift;
    let target_x = rotate_planes(&source_x, rotation);
    let target_y = dense_forward(&shifted, &target_x)?;

    let noisy: Vec<Matrix> = teacher
        .iter()
        .map(|w| {
            let noise = gaussian(
                &mut rng,
                w.rows(),
                w.cols(),
                cfg.pretrain_noise / (w.cols() as f64).sqrt(),
            );
            w.add(&noise)
        })
        .collect::<Result<_>>()?;
    let pretrained = dense_fit(&noisy, &source_x, &source_y, cfg.pretrain_steps, cfg.pretrain_lr)?;

    Ok(ToyTask {
        seed,
        shift_strength,
        rotation,
        teacher,
        pretrained,
        source_x,
        source_y,
        target_x,
        target_y,
    })
}

impl ToyTask {
    /// `(source, target)` loss of the pre-trained dense model.
    pub fn pretrained_losses(&self) -> Result<(f64, f64)> {
        let src = half_mse(&dense_forward(&self.pretrained, &self.source_x)?, &self.source_y)?.0;
        let tgt = half_mse(&dense_forward(&self.pretrained, &self.target_x)?, &self.target_y)?.0;
        Ok((src, tgt))
    }
}
