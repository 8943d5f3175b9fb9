//! AdamW with decoupled weight decay, plus the cosine-annealing schedule.

use serde::{Deserialize, Serialize};

use crate::codebook::ConceptualCodebook;
use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First/second moment buffers shaped like the codebook, plus the shared
/// step counter (incremented once per optimizer step).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub keys_m: Vec<Vec<f64>>,
    pub keys_v: Vec<Vec<f64>>,
    pub prompts_m: Vec<Vec<f64>>,
    pub prompts_v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(cb: &ConceptualCodebook) -> Self {
        let zeros_like = |rows: &[Vec<f64>]| rows.iter().map(|r| vec![0.0; r.len()]).collect();
        OptimizerState {
            step: 0,
            keys_m: zeros_like(cb.keys()),
            keys_v: zeros_like(cb.keys()),
            prompts_m: zeros_like(cb.prompts()),
            prompts_v: zeros_like(cb.prompts()),
        }
    }
}

/// One AdamW update on a single parameter buffer. `t` is the already
/// incremented step count used for bias correction.
pub fn adamw_step(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if param.len() != grad.len() || param.len() != m.len() || param.len() != v.len() {
        return Err(Error::shape(
            "adamw_step",
            format!("param {} grad {} m {} v {}", param.len(), grad.len(), m.len(), v.len()),
        ));
    }
    if lr < 0.0 || lr.is_nan() {
        return Err(Error::Config(format!("learning rate must be non-negative, got {lr}")));
    }
    let bc1 = 1.0 - BETA1.powi(t as i32);
    let bc2 = 1.0 - BETA2.powi(t as i32);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = BETA1 * m[i] + (1.0 - BETA1) * g;
        v[i] = BETA2 * v[i] + (1.0 - BETA2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        param[i] -= lr * m_hat / (v_hat.sqrt() + EPSILON) + lr * weight_decay * param[i];
    }
    Ok(())
}

/// Gradient buffers aligned with the codebook layout.
#[derive(Debug, Clone)]
pub struct CodebookGrads {
    pub keys: Vec<Vec<f64>>,
    pub prompts: Vec<Vec<f64>>,
}

/// Apply one optimizer step to every codebook row. Decay hits prompts;
/// keys live on a cosine geometry where decay only shrinks magnitude, so
/// they are excluded unless `decay_keys` is set.
pub fn apply_adamw(
    cb: &mut ConceptualCodebook,
    grads: &CodebookGrads,
    state: &mut OptimizerState,
    lr: f64,
    weight_decay: f64,
    decay_keys: bool,
) -> Result<()> {
    state.step += 1;
    let t = state.step;
    let key_decay = if decay_keys { weight_decay } else { 0.0 };
    for i in 0..cb.size() {
        adamw_step(
            &mut cb.keys_mut()[i],
            &grads.keys[i],
            &mut state.keys_m[i],
            &mut state.keys_v[i],
            t,
            lr,
            key_decay,
        )?;
    }
    for i in 0..cb.size() {
        adamw_step(
            &mut cb.prompts_mut()[i],
            &grads.prompts[i],
            &mut state.prompts_m[i],
            &mut state.prompts_v[i],
            t,
            lr,
            weight_decay,
        )?;
    }
    Ok(())
}

/// lr_t = 0.5 · lr0 · (1 + cos(π · step / total_steps)).
pub fn cosine_lr(step: u64, total_steps: u64, lr0: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Config("total_steps must be positive".into()));
    }
    if step > total_steps {
        return Err(Error::Config(format!("step {step} beyond total {total_steps}")));
    }
    Ok(0.5 * lr0 * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos()))
}
