//! Trainable layer parameters, their storage, and the SGD update.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::graph::Gradients;
use super::{Result, Tensor, TensorError};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Rounds a value through `f32` so it survives a 32-bit checkpoint unchanged.
#[inline]
pub fn quantize(v: f64) -> f64 {
    v as f32 as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LayerId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Slot {
    Weight,
    Bias,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    BatchNorm,
    Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub id: LayerId,
    pub name: String,
    pub kind: LayerKind,
    /// conv `[out, in, kh, kw]`, linear `[out, in]`, batchnorm gamma `[c]`.
    pub weights: Tensor,
    /// `[out]`, or beta `[c]` for batchnorm.
    pub bias: Tensor,
    pub running_mean: Option<Tensor>,
    pub running_var: Option<Tensor>,
    pub momentum: f64,
    pub epsilon: f64,
}

impl LayerParams {
    pub fn num_trainable(&self) -> usize {
        self.weights.numel() + self.bias.numel()
    }

    pub fn tensor(&self, slot: Slot) -> &Tensor {
        match slot {
            Slot::Weight => &self.weights,
            Slot::Bias => &self.bias,
        }
    }

    pub fn tensor_mut(&mut self, slot: Slot) -> &mut Tensor {
        match slot {
            Slot::Weight => &mut self.weights,
            Slot::Bias => &mut self.bias,
        }
    }

    /// Conv kernel extent, `(kh, kw)`.
    pub fn kernel(&self) -> (usize, usize) {
        let s = self.weights.shape();
        (s[2], s[3])
    }
}

/// Owns every layer of a model. Layers are addressed by [`LayerId`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    layers: Vec<LayerParams>,
}

/// He-uniform: bound `sqrt(6 / fan_in)`.
fn fan_in_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| quantize(rng.random_range(-bound..bound)))
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, make: impl FnOnce(LayerId) -> LayerParams) -> LayerId {
        let id = LayerId(self.layers.len());
        self.layers.push(make(id));
        id
    }

    pub fn add_conv(
        &mut self,
        name: impl Into<String>,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        rng: &mut ChaCha8Rng,
    ) -> LayerId {
        let fan_in = in_ch * kernel * kernel;
        let weights = fan_in_uniform(rng, &[out_ch, in_ch, kernel, kernel], fan_in);
        self.push(|id| LayerParams {
            id,
            name: name.into(),
            kind: LayerKind::Conv,
            weights,
            bias: Tensor::zeros(&[out_ch]),
            running_mean: None,
            running_var: None,
            momentum: 0.0,
            epsilon: 0.0,
        })
    }

    pub fn add_linear(
        &mut self,
        name: impl Into<String>,
        in_features: usize,
        out_features: usize,
        rng: &mut ChaCha8Rng,
    ) -> LayerId {
        let weights = fan_in_uniform(rng, &[out_features, in_features], in_features);
        self.push(|id| LayerParams {
            id,
            name: name.into(),
            kind: LayerKind::Linear,
            weights,
            bias: Tensor::zeros(&[out_features]),
            running_mean: None,
            running_var: None,
            momentum: 0.0,
            epsilon: 0.0,
        })
    }

    pub fn add_batch_norm(&mut self, name: impl Into<String>, channels: usize) -> LayerId {
        self.push(|id| LayerParams {
            id,
            name: name.into(),
            kind: LayerKind::BatchNorm,
            weights: Tensor::full(&[channels], 1.0),
            bias: Tensor::zeros(&[channels]),
            running_mean: Some(Tensor::zeros(&[channels])),
            running_var: Some(Tensor::full(&[channels], 1.0)),
            momentum: BN_MOMENTUM,
            epsilon: BN_EPSILON,
        })
    }

    pub fn get(&self, id: LayerId) -> &LayerParams {
        &self.layers[id.0]
    }

    pub fn get_mut(&mut self, id: LayerId) -> &mut LayerParams {
        &mut self.layers[id.0]
    }

    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LayerParams] {
        &mut self.layers
    }

    pub fn find(&self, name: &str) -> Option<&LayerParams> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn num_trainable(&self) -> usize {
        self.layers.iter().map(LayerParams::num_trainable).sum()
    }

    /// Adds parameter gradients from a backward pass into each tensor's grad slot.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (layer, slot, g) in grads.param_grads() {
            let t = self.layers[layer.0].tensor_mut(slot);
            for (acc, v) in t.grad_mut().iter_mut().zip(g) {
                *acc += v;
            }
        }
    }

    /// Writes the running statistics recorded by a train-mode forward pass.
    pub fn apply_running_updates(&mut self, updates: &[(LayerId, Vec<f64>, Vec<f64>)]) {
        for (id, mean, var) in updates {
            let layer = &mut self.layers[id.0];
            if let Some(rm) = layer.running_mean.as_mut() {
                for (dst, v) in rm.data_mut().iter_mut().zip(mean) {
                    *dst = quantize(*v);
                }
            }
            if let Some(rv) = layer.running_var.as_mut() {
                for (dst, v) in rv.data_mut().iter_mut().zip(var) {
                    *dst = quantize(*v);
                }
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for l in &mut self.layers {
            l.weights.clear_grad();
            l.bias.clear_grad();
        }
    }
}

/// `theta <- theta - lr * grad`, then clears every gradient.
pub fn sgd_step(store: &mut ParamStore, lr: f64) -> Result<()> {
    if !(lr.is_finite() && lr >= 0.0) {
        return Err(TensorError::Argument {
            op: "sgd_step",
            msg: format!("learning rate {lr} must be finite and non-negative"),
        });
    }
    for layer in store.layers_mut() {
        for slot in [Slot::Weight, Slot::Bias] {
            let t = layer.tensor_mut(slot);
            if let Some(g) = t.grad.take() {
                for (p, gv) in t.data.iter_mut().zip(&g) {
                    *p = quantize(*p - lr * gv);
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn sgd_update_rule() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let id = store.add_linear("fc", 1, 1, &mut rng);
        store.get_mut(id).weights.data_mut()[0] = 1.0;
        store.get_mut(id).weights.grad_mut()[0] = 2.0;
        sgd_step(&mut store, 0.1).unwrap();
        let w = store.get(id).weights.data()[0];
        assert!((w - 0.8).abs() < 1e-7, "{w}");
        assert!(store.get(id).weights.grad().is_none());
    }

    #[test]
    fn init_is_f32_representable_and_shaped() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = store.add_conv("c", 3, 5, 3, &mut rng);
        let bn = store.add_batch_norm("bn", 5);
        assert_eq!(store.get(c).weights.shape(), &[5, 3, 3, 3]);
        assert!(store.get(c).weights.data().iter().all(|&v| quantize(v) == v));
        assert!(store.get(c).bias.data().iter().all(|&v| v == 0.0));
        let bn = store.get(bn);
        assert!(bn.running_var.as_ref().unwrap().data().iter().all(|&v| v > 0.0));
        assert_eq!(store.num_trainable(), 5 * 27 + 5 + 10);
    }
}
