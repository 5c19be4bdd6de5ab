//! AdamW with decoupled weight decay and a cosine-annealed learning rate.

use super::TrainError;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub total_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimState {
    pub fn new(num_params: usize, base_lr: f64, weight_decay: f64, total_steps: u64) -> Self {
        OptimState {
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            step: 0,
            base_lr,
            weight_decay,
            total_steps,
            beta1: BETA1,
            beta2: BETA2,
            eps: EPSILON,
        }
    }

    /// Scheduled learning rate for the next step.
    pub fn current_lr(&self) -> f64 {
        cosine_lr(
            self.step.min(self.total_steps),
            self.total_steps,
            self.base_lr,
        )
        .unwrap_or(0.0)
    }
}

/// `base_lr · ½ · (1 + cos(π · step / total_steps))`.
pub fn cosine_lr(step: u64, total_steps: u64, base_lr: f64) -> Result<f64, TrainError> {
    if step > total_steps {
        return Err(TrainError::StepOutOfRange { step, total_steps });
    }
    if total_steps == 0 {
        return Ok(base_lr);
    }
    let t = step as f64 / total_steps as f64;
    Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
}

/// One AdamW update at learning rate `lr`. Entries with `mask[i] == false` are
/// left untouched (their moments do not advance).
pub fn adamw_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut OptimState,
    lr: f64,
    mask: Option<&[bool]>,
) -> Result<(), TrainError> {
    let n = params.len();
    if grads.len() != n
        || state.m.len() != n
        || state.v.len() != n
        || mask.is_some_and(|m| m.len() != n)
    {
        return Err(TrainError::ShapeMismatch(format!(
            "params {n}, grads {}, moments {}/{}",
            grads.len(),
            state.m.len(),
            state.v.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(TrainError::NonFiniteGradient(i));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for i in 0..n {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        let g = grads[i];
        params[i] -= lr * state.weight_decay * params[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}
