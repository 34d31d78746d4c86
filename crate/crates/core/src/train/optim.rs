use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::ModelParams;

/// Learning rate at `step`: linear warmup from 0 over `warmup` steps, then
/// linear decay to 0 at `total`.
pub fn lr_at(step: u64, base_lr: f64, warmup: u64, total: u64) -> Result<f64> {
    if total <= warmup {
        return Err(Error::Config(format!("total steps ({total}) must exceed warmup ({warmup})")));
    }
    if step > total {
        return Err(Error::InvalidArgument(format!("step {step} past the end of the schedule ({total})")));
    }
    if step < warmup {
        return Ok(base_lr * step as f64 / warmup as f64);
    }
    Ok(base_lr * (total - step) as f64 / (total - warmup) as f64)
}

/// AdamW with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    /// Number of updates applied so far.
    pub t: u64,
}

impl AdamW {
    pub fn new(params: &ModelParams<f32>, weight_decay: f64) -> Self {
        let zeros: Vec<Tensor<f32>> = params.tensors().iter().map(|n| Tensor::zeros(n.tensor.shape())).collect();
        AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, m: zeros.clone(), v: zeros, t: 0 }
    }

    /// Restores moment estimates saved after `t` updates.
    pub fn from_state(
        params: &ModelParams<f32>,
        weight_decay: f64,
        m: Vec<Tensor<f32>>,
        v: Vec<Tensor<f32>>,
        t: u64,
    ) -> Result<Self> {
        let mut opt = AdamW::new(params, weight_decay);
        if m.len() != opt.m.len() || v.len() != opt.v.len() {
            return Err(Error::shape("AdamW", "moment count differs from parameter count"));
        }
        for (n, (a, b)) in params.tensors().iter().zip(m.iter().zip(&v)) {
            if n.tensor.shape() != a.shape() || n.tensor.shape() != b.shape() {
                return Err(Error::shape("AdamW", format!("moment shapes for `{}` differ from the parameter", n.name)));
            }
        }
        opt.m = m;
        opt.v = v;
        opt.t = t;
        Ok(opt)
    }

    /// Applies one update with learning rate `lr`. Gradients are checked
    /// before anything is modified.
    pub fn step(&mut self, params: &mut ModelParams<f32>, grads: &[Tensor<f32>], lr: f64) -> Result<()> {
        if grads.len() != params.tensors().len() {
            return Err(Error::shape("AdamW", format!("{} gradients for {} parameters", grads.len(), params.tensors().len())));
        }
        for (n, g) in params.tensors().iter().zip(grads) {
            if g.shape() != n.tensor.shape() {
                return Err(Error::shape("AdamW", format!("gradient for `{}` has shape {:?}", n.name, g.shape())));
            }
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient { name: n.name.clone() });
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let decay = (1.0 - lr * self.weight_decay) as f32;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let step_size = (lr / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        let eps = self.eps as f32;
        for (((p, g), m), v) in params.tensors_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *p *= decay;
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= step_size * *m / (v.sqrt() / bc2_sqrt + eps);
            }
        }
        Ok(())
    }
}
