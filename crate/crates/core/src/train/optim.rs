use std::f64::consts::PI;

use crate::error::{ensure, Result};
use crate::tensor::Tensor;

pub const ADAM_EPS: f64 = 1e-8;

/// Linear warmup from 0 to `base_lr` over `warmup_fraction` of the run, then
/// cosine decay to 0 at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, base_lr: f64, warmup_fraction: f64) -> f64 {
    let total = total_steps.max(1) as f64;
    let step = (step as f64).min(total);
    let warmup = (warmup_fraction * total).round();
    if step < warmup {
        return base_lr * step / warmup;
    }
    let progress = if total > warmup { (step - warmup) / (total - warmup) } else { 1.0 };
    base_lr * 0.5 * (1.0 + (PI * progress).cos())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
}

/// First and second moments for every parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    pub step: u64,
    /// Whether weight decay applies to each tensor.
    pub decay: Vec<bool>,
}

impl OptimizerState {
    /// Zero moments shaped like `params`, decaying every tensor.
    pub fn new(params: &[&Tensor<f32>]) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
            decay: vec![true; params.len()],
        }
    }

    /// Zero moments for a model; biases, norm parameters and learned tokens are not decayed.
    pub fn for_model(params: &crate::model::ModelParams) -> Self {
        let tensors: Vec<&Tensor<f32>> = params.iter().map(|(_, t)| t).collect();
        let mut state = Self::new(&tensors);
        state.decay = params.iter().map(|(name, _)| name.ends_with(".w")).collect();
        state
    }
}

/// One AdamW step with bias-corrected moments and decoupled weight decay.
pub fn adamw_update(params: &mut [&mut Tensor<f32>], grads: &[Tensor<f32>], state: &mut OptimizerState, hp: &AdamW) -> Result<()> {
    ensure!(
        params.len() == grads.len() && params.len() == state.m.len(),
        "optimizer got {} parameters, {} gradients and {} moment slots",
        params.len(),
        grads.len(),
        state.m.len()
    );
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        ensure!(
            p.shape() == g.shape() && p.shape() == state.m[i].shape(),
            "parameter {i} has shape {:?} but gradient {:?}",
            p.shape(),
            g.shape()
        );
        let wd = if state.decay[i] { hp.weight_decay } else { 0.0 };
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, (x, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            let gj = gj as f64;
            let mj = hp.beta1 * m[j] as f64 + (1.0 - hp.beta1) * gj;
            let vj = hp.beta2 * v[j] as f64 + (1.0 - hp.beta2) * gj * gj;
            m[j] = mj as f32;
            v[j] = vj as f32;
            let xj = *x as f64;
            let update = (mj / c1) / ((vj / c2).sqrt() + ADAM_EPS) + wd * xj;
            *x = (xj - hp.lr * update) as f32;
        }
    }
    Ok(())
}
