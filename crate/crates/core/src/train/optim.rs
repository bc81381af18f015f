use crate::error::{ensure, Error, Result};
use crate::vit::ModelParams;

/// Adam constants plus the decoupled weight-decay coefficient.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 5e-3 }
    }
}

/// First and second moment buffers plus the number of steps taken.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: ModelParams,
    pub v: ModelParams,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        Self { step: 0, m: params.zeros_like(), v: params.zeros_like() }
    }
}

/// `lr_min + (lr_max - lr_min) * (1 + cos(pi * t / total)) / 2`.
pub fn cosine_lr(t: u64, total_steps: u64, lr_max: f64, lr_min: f64) -> Result<f64> {
    ensure!(total_steps >= 1, InvalidParameter, "schedule needs at least one step");
    ensure!(t <= total_steps, InvalidParameter, "step {t} beyond schedule length {total_steps}");
    let phase = std::f64::consts::PI * t as f64 / total_steps as f64;
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + phase.cos()))
}

/// One Adam update with bias correction and decoupled weight decay.
///
/// Each parameter is first scaled by `1 - lr * weight_decay`, then moved by
/// `-lr * m_hat / (sqrt(v_hat) + eps)`.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut AdamState,
    lr: f64,
    hyper: &AdamHyper,
) -> Result<()> {
    ensure!(lr >= 0.0 && lr.is_finite(), InvalidParameter, "learning rate must be finite and >= 0");
    if let Some(name) = grads.first_non_finite() {
        return Err(Error::Divergence { tensor: name, msg: "non-finite gradient rejected by optimiser".into() });
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    let decay = 1.0 - lr * hyper.weight_decay;
    let g_all: Vec<_> = grads.tensors().into_iter().map(|(_, t)| t).collect();
    let p_all = params.tensors_mut();
    let m_all = state.m.tensors_mut();
    let v_all = state.v.tensors_mut();
    for (((p, g), m), v) in p_all.into_iter().zip(g_all).zip(m_all).zip(v_all) {
        for i in 0..p.data.len() {
            let gi = g.data[i];
            m.data[i] = hyper.beta1 * m.data[i] + (1.0 - hyper.beta1) * gi;
            v.data[i] = hyper.beta2 * v.data[i] + (1.0 - hyper.beta2) * gi * gi;
            let mh = m.data[i] / bc1;
            let vh = v.data[i] / bc2;
            p.data[i] = p.data[i] * decay - lr * mh / (vh.sqrt() + hyper.eps);
        }
    }
    if let Some(name) = params.first_non_finite() {
        return Err(Error::Divergence { tensor: name, msg: "non-finite parameter after update".into() });
    }
    Ok(())
}
