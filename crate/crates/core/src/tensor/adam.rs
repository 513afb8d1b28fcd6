use serde::{Deserialize, Serialize};

use super::ModelParams;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 2e-4, beta1: 0.5, beta2: 0.999, epsilon: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.beta1 > 0.0
            && self.beta1 < 1.0
            && self.beta2 > 0.0
            && self.beta2 < 1.0
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidHyperparam(format!("invalid Adam settings {self:?}")))
        }
    }
}

/// Adam moments for every tensor of one [`ModelParams`], in the same order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step_count: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ModelParams) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().map(|t| vec![0.0; t.len()]).collect();
        Self { config, step_count: 0, first_moment: zeros.clone(), second_moment: zeros }
    }
}

/// One bias-corrected Adam update. `grads[i]` is the gradient of the i-th
/// parameter tensor.
pub fn adam_step(params: &mut ModelParams, grads: &[Vec<f64>], state: &mut AdamState) -> Result<()> {
    if grads.len() != params.len() || state.first_moment.len() != params.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.first_moment.len()
        )));
    }
    for ((p, g), m) in params.tensors().zip(grads).zip(&state.first_moment) {
        if p.len() != g.len() || p.len() != m.len() {
            return Err(Error::ShapeMismatch(format!(
                "param of {} elements, grad {}, moment {}",
                p.len(),
                g.len(),
                m.len()
            )));
        }
    }
    state.step_count += 1;
    let AdamConfig { learning_rate, beta1, beta2, epsilon } = state.config;
    let t = state.step_count as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for (((p, g), m), v) in params
        .tensors_mut()
        .zip(grads)
        .zip(&mut state.first_moment)
        .zip(&mut state.second_moment)
    {
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = beta1 * *mi + (1.0 - beta1) * gi;
            *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *w -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single(values: &[f64]) -> ModelParams {
        let mut p = ModelParams::new();
        p.push("w", Tensor::new(vec![values.len()], values.to_vec()).unwrap());
        p
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = single(&[0.3, -1.2]);
        let mut st = AdamState::new(AdamConfig::default(), &p);
        adam_step(&mut p, &[vec![0.0, 0.0]], &mut st).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[0.3, -1.2]);
        assert_eq!(st.step_count, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate_against_sign() {
        let cfg = AdamConfig { learning_rate: 0.01, beta1: 0.9, beta2: 0.999, epsilon: 1e-12 };
        let mut p = single(&[1.0, 1.0, 1.0]);
        let mut st = AdamState::new(cfg, &p);
        adam_step(&mut p, &[vec![3.0, -0.5, 1e-3]], &mut st).unwrap();
        let got = p.get("w").unwrap().data();
        for (g, expect) in got.iter().zip([0.99, 1.01, 0.99]) {
            assert!((g - expect).abs() < 1e-8, "{g} vs {expect}");
        }
    }

    #[test]
    fn two_steps_match_scalar_oracle() {
        // Hand-rolled scalar Adam, independent of the vectorised path.
        let (lr, b1, b2, eps) = (0.1, 0.5, 0.9, 1e-8);
        let (mut w, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        let mut trajectory = Vec::new();
        for t in 1..=2 {
            let g = 1.0;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            w -= lr * mh / (vh.sqrt() + eps);
            trajectory.push(w);
        }
        let cfg = AdamConfig { learning_rate: lr, beta1: b1, beta2: b2, epsilon: eps };
        let mut p = single(&[0.0]);
        let mut st = AdamState::new(cfg, &p);
        for expect in trajectory {
            adam_step(&mut p, &[vec![1.0]], &mut st).unwrap();
            assert_eq!(p.get("w").unwrap().data()[0], expect);
        }
        assert_eq!(st.step_count, 2);
    }

    #[test]
    fn misaligned_gradient_is_rejected() {
        let mut p = single(&[0.0, 0.0]);
        let mut st = AdamState::new(AdamConfig::default(), &p);
        assert!(matches!(adam_step(&mut p, &[vec![1.0]], &mut st), Err(Error::ShapeMismatch(_))));
        assert_eq!(st.step_count, 0);
    }
}
