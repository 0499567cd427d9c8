//! Manual backpropagation through dual-adapter layers and a tanh MLP built
//! from them. Only adapter factors receive gradients.

use serde::{Deserialize, Serialize};

use crate::adapter::{DualAdapterLinear, LoraAdapter};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Gradients of one adapter's factors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGrads {
    pub b: Matrix,
    pub a: Matrix,
}

/// Gradients produced by [`backward`]. The residual weight has none.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub main: Option<AdapterGrads>,
    pub sub: Option<AdapterGrads>,
    pub x: Option<Matrix>,
}

impl LayerGrads {
    /// Flattened in the parameter order of [`ParamVector`] for layers:
    /// main `B`, main `A`, sub `B`, sub `A`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for g in self.main.iter().chain(self.sub.iter()) {
            out.extend_from_slice(g.b.as_slice());
            out.extend_from_slice(g.a.as_slice());
        }
        out
    }
}

fn adapter_grads(adapter: &LoraAdapter, x: &Matrix, upstream: &Matrix) -> Result<(AdapterGrads, Matrix)> {
    let ax = adapter.a().matmul(x)?;
    let bt_up = adapter.b().t_matmul(upstream)?;
    let grads = AdapterGrads {
        b: upstream.matmul_t(&ax)?,
        a: bt_up.matmul_t(x)?,
    };
    Ok((grads, bt_up))
}

fn layer_backward(layer: &DualAdapterLinear, x: &Matrix, upstream: &Matrix, want_x: bool) -> Result<LayerGrads> {
    if x.rows() != layer.d_in() || upstream.rows() != layer.d_out() || x.cols() != upstream.cols() {
        return Err(Error::Shape {
            op: "backward",
            expected: format!("x {}xN and upstream {}xN", layer.d_in(), layer.d_out()),
            got: format!(
                "x {}x{}, upstream {}x{}",
                x.rows(),
                x.cols(),
                upstream.rows(),
                upstream.cols()
            ),
        });
    }
    let mut grad_x = if want_x {
        Some(layer.w_residual().t_matmul(upstream)?)
    } else {
        None
    };
    let mut per_adapter = |adapter: Option<&LoraAdapter>| -> Result<Option<AdapterGrads>> {
        let Some(adapter) = adapter else { return Ok(None) };
        let (grads, bt_up) = adapter_grads(adapter, x, upstream)?;
        if let Some(gx) = grad_x.as_mut() {
            *gx = gx.add(&adapter.a().t_matmul(&bt_up)?)?;
        }
        Ok(Some(grads))
    };
    let main = per_adapter(layer.main())?;
    let sub = per_adapter(layer.sub())?;
    Ok(LayerGrads { main, sub, x: grad_x })
}

/// Gradients of a scalar loss through `forward(layer, x)` given
/// `upstream = ∂loss/∂output`:
/// `∂B = up·(A·x)ᵀ`, `∂A = Bᵀ·up·xᵀ`, `∂x = (W_res + Σ B·A)ᵀ·up`.
pub fn backward(layer: &DualAdapterLinear, x: &Matrix, upstream: &Matrix) -> Result<LayerGrads> {
    layer_backward(layer, x, upstream, true)
}

/// Flat, indexable view over the trainable entries of a model.
pub trait ParamVector {
    fn num_params(&self) -> usize;
    fn param(&self, idx: usize) -> f64;
    fn set_param(&mut self, idx: usize, value: f64);
}

fn adapters_of(layer: &DualAdapterLinear) -> impl Iterator<Item = &LoraAdapter> {
    layer.main().into_iter().chain(layer.sub())
}

fn locate(layer: &DualAdapterLinear, mut idx: usize) -> (usize, bool, usize) {
    for (slot, adapter) in adapters_of(layer).enumerate() {
        let nb = adapter.b().as_slice().len();
        let na = adapter.a().as_slice().len();
        if idx < nb {
            return (slot, true, idx);
        }
        idx -= nb;
        if idx < na {
            return (slot, false, idx);
        }
        idx -= na;
    }
    panic!("parameter index out of range");
}

impl ParamVector for DualAdapterLinear {
    fn num_params(&self) -> usize {
        self.trainable_param_count()
    }

    fn param(&self, idx: usize) -> f64 {
        let (slot, is_b, off) = locate(self, idx);
        let adapter = adapters_of(self).nth(slot).expect("slot located");
        if is_b {
            adapter.b().as_slice()[off]
        } else {
            adapter.a().as_slice()[off]
        }
    }

    fn set_param(&mut self, idx: usize, value: f64) {
        let (slot, is_b, off) = locate(self, idx);
        let (main, sub) = self.adapters_mut();
        let adapter = main.into_iter().chain(sub).nth(slot).expect("slot located");
        let (b, a) = adapter.factors_mut();
        if is_b {
            b[off] = value;
        } else {
            a[off] = value;
        }
    }
}

/// Intermediate values kept by [`DualMlp::forward_cached`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer; `inputs[0]` is the network input.
    pub inputs: Vec<Matrix>,
    pub output: Matrix,
}

/// Stack of dual-adapter layers with `tanh` between consecutive layers and a
/// linear output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualMlp {
    pub layers: Vec<DualAdapterLinear>,
}

impl DualMlp {
    pub fn new(layers: Vec<DualAdapterLinear>) -> Result<Self> {
        for pair in layers.windows(2) {
            if pair[0].d_out() != pair[1].d_in() {
                return Err(Error::Shape {
                    op: "DualMlp",
                    expected: format!("layer input {}", pair[0].d_out()),
                    got: format!("{}", pair[1].d_in()),
                });
            }
        }
        Ok(Self { layers })
    }

    pub fn forward_cached(&self, x: &Matrix) -> Result<ForwardCache> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut current = x.clone();
        let last = self.layers.len().saturating_sub(1);
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&current)?;
            inputs.push(current);
            current = if i < last { z.map(f64::tanh) } else { z };
        }
        Ok(ForwardCache {
            inputs,
            output: current,
        })
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward_cached(x)?.output)
    }

    /// Forward through the merged dense weights.
    pub fn forward_merged(&self, x: &Matrix) -> Result<Matrix> {
        let last = self.layers.len().saturating_sub(1);
        let mut current = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.merge().matmul(&current)?;
            current = if i < last { z.map(f64::tanh) } else { z };
        }
        Ok(current)
    }

    /// Backpropagates `upstream = ∂loss/∂output`; returns per-layer gradients
    /// (no input gradient for the first layer).
    pub fn backward(&self, cache: &ForwardCache, upstream: &Matrix) -> Result<Vec<LayerGrads>> {
        let n = self.layers.len();
        let mut grads: Vec<Option<LayerGrads>> = vec![None; n];
        let mut up = upstream.clone();
        for i in (0..n).rev() {
            let g = layer_backward(&self.layers[i], &cache.inputs[i], &up, i > 0)?;
            if i > 0 {
                let gx = g.x.as_ref().expect("requested input gradient");
                // d tanh(z) = 1 − tanh(z)², and inputs[i] = tanh(z_{i−1})
                let h = &cache.inputs[i];
                up = Matrix::from_fn(gx.rows(), gx.cols(), |r, c| {
                    let t = h[(r, c)];
                    gx[(r, c)] * (1.0 - t * t)
                });
            }
            grads[i] = Some(g);
        }
        Ok(grads.into_iter().map(|g| g.expect("filled")).collect())
    }

    /// `0.5 · mean over samples of ‖output − target‖²`, with its gradients.
    pub fn loss_and_grads(&self, x: &Matrix, target: &Matrix) -> Result<(f64, Vec<LayerGrads>)> {
        let cache = self.forward_cached(x)?;
        let (loss, upstream) = half_mse(&cache.output, target)?;
        let grads = self.backward(&cache, &upstream)?;
        Ok((loss, grads))
    }

    pub fn loss(&self, x: &Matrix, target: &Matrix) -> Result<f64> {
        Ok(half_mse(&self.forward(x)?, target)?.0)
    }
}

/// `0.5/n · ‖out − target‖_F²` for `n` sample columns, and its gradient.
pub fn half_mse(out: &Matrix, target: &Matrix) -> Result<(f64, Matrix)> {
    let diff = out.sub(target)?;
    let n = out.cols() as f64;
    let loss = 0.5 * diff.as_slice().iter().map(|v| v * v).sum::<f64>() / n;
    Ok((loss, diff.scale(1.0 / n)))
}

impl ParamVector for DualMlp {
    fn num_params(&self) -> usize {
        self.layers.iter().map(ParamVector::num_params).sum()
    }

    fn param(&self, mut idx: usize) -> f64 {
        for layer in &self.layers {
            let n = layer.num_params();
            if idx < n {
                return layer.param(idx);
            }
            idx -= n;
        }
        panic!("parameter index out of range");
    }

    fn set_param(&mut self, mut idx: usize, value: f64) {
        for layer in &mut self.layers {
            let n = layer.num_params();
            if idx < n {
                return layer.set_param(idx, value);
            }
            idx -= n;
        }
        panic!("parameter index out of range");
    }
}

pub fn flatten_grads(grads: &[LayerGrads]) -> Vec<f64> {
    grads.iter().flat_map(LayerGrads::flatten).collect()
}
