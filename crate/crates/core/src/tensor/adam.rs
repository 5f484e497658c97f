use serde::{Deserialize, Serialize};

use super::{ParamStore, Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self { learning_rate, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 0.001, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Moment accumulators, shape-congruent with the parameters they track.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.values().iter().map(|t| vec![0.0; t.len()]).collect();
        Self { config, step: 0, first: zeros.clone(), second: zeros }
    }
}

/// One bias-corrected Adam update. Rejects non-finite or misshapen
/// gradients before touching any parameter.
pub fn adam_step(state: &mut AdamState, params: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
    if grads.len() != params.len() || state.first.len() != params.len() {
        return Err(TensorError::InvalidArgument {
            op: "adam_step",
            reason: format!("{} gradients for {} parameters", grads.len(), params.len()),
        });
    }
    for (id, g) in params.ids().zip(grads) {
        let p = params.get(id);
        if g.shape() != p.shape() {
            return Err(TensorError::GradientShape {
                param: params.name(id).to_string(),
                expected: p.shape().to_vec(),
                got: g.shape().to_vec(),
            });
        }
        if !g.is_finite() {
            return Err(TensorError::NonFiniteGradient { param: params.name(id).to_string() });
        }
    }
    state.step += 1;
    let AdamConfig { learning_rate, beta1, beta2, epsilon } = state.config;
    let c1 = 1.0 - beta1.powi(state.step as i32);
    let c2 = 1.0 - beta2.powi(state.step as i32);
    for (i, g) in grads.iter().enumerate() {
        let m = &mut state.first[i];
        let v = &mut state.second[i];
        let p = params.values_mut()[i].data_mut();
        for j in 0..p.len() {
            let gj = g.data()[j];
            m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
            v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            p[j] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
    Ok(())
}
