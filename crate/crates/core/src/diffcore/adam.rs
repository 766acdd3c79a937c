use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::DiffError;

/// A named, trainable parameter array.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub name: String,
    pub value: Tensor,
}

impl ParamBlock {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Self {
            name: name.into(),
            value,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates and the step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One bias-corrected Adam update of every block in `params`.
///
/// All gradients are validated before any parameter is touched.
pub fn adam_step(
    params: &mut [ParamBlock],
    grads: &[Tensor],
    state: &mut AdamState,
    config: &AdamConfig,
) -> Result<(), DiffError> {
    if grads.len() != params.len() {
        return Err(DiffError::ShapeMismatch {
            op: "adam_step",
            left: vec![params.len()],
            right: vec![grads.len()],
        });
    }
    for (p, g) in params.iter().zip(grads) {
        if p.value.shape() != g.shape() {
            return Err(DiffError::ShapeMismatch {
                op: "adam_step",
                left: p.value.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
        if !g.is_finite() {
            return Err(DiffError::NonFiniteGradient { block: p.name.clone() });
        }
    }
    if state.first.len() != params.len() {
        state.first = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        state.second = state.first.clone();
        state.step = 0;
    }
    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - config.beta1.powi(t);
    let bias2 = 1.0 - config.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.first[i], &mut state.second[i]);
        for (j, w) in p.value.data_mut().iter_mut().enumerate() {
            let gj = g.data()[j];
            m[j] = config.beta1 * m[j] + (1.0 - config.beta1) * gj;
            v[j] = config.beta2 * v[j] + (1.0 - config.beta2) * gj * gj;
            let m_hat = m[j] / bias1;
            let v_hat = v[j] / bias2;
            *w -= config.lr * m_hat / (v_hat.sqrt() + config.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_keeps_parameters() {
        let mut params = vec![ParamBlock::new("w", Tensor::row(vec![1.0, -2.0]))];
        let before = params.clone();
        let mut state = AdamState::new();
        adam_step(
            &mut params,
            &[Tensor::zeros(&[1, 2])],
            &mut state,
            &AdamConfig::default(),
        )
        .unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn descends_on_square() {
        let mut params = vec![ParamBlock::new("w", Tensor::scalar(1.0))];
        let mut state = AdamState::new();
        let grad = Tensor::scalar(2.0 * params[0].value.item());
        adam_step(&mut params, &[grad], &mut state, &AdamConfig::with_lr(0.1)).unwrap();
        assert!(params[0].value.item() < 1.0);
    }

    #[test]
    fn non_finite_gradient_names_block() {
        let mut params = vec![
            ParamBlock::new("ok", Tensor::scalar(1.0)),
            ParamBlock::new("bad", Tensor::scalar(1.0)),
        ];
        let before = params.clone();
        let mut state = AdamState::new();
        let err = adam_step(
            &mut params,
            &[Tensor::scalar(1.0), Tensor::scalar(f64::INFINITY)],
            &mut state,
            &AdamConfig::default(),
        )
        .unwrap_err();
        assert_eq!(err, DiffError::NonFiniteGradient { block: "bad".into() });
        assert_eq!(params, before);
    }

    #[test]
    fn converges_on_quadratic_bowl() {
        // f(w) = 2 w0^2 + 0.5 w1^2 + w0 w1 ; grad = (4 w0 + w1, w1 + w0)
        let grad_of = |w: &[f64]| vec![4.0 * w[0] + w[1], w[1] + w[0]];
        let mut params = vec![ParamBlock::new("w", Tensor::row(vec![1.5, -2.0]))];
        let mut state = AdamState::new();
        let config = AdamConfig::with_lr(0.05);
        for _ in 0..200 {
            let g = Tensor::row(grad_of(params[0].value.data()));
            adam_step(&mut params, &[g], &mut state, &config).unwrap();
        }
        let g = grad_of(params[0].value.data());
        let norm = (g[0] * g[0] + g[1] * g[1]).sqrt();
        assert!(norm < 1e-3, "gradient norm {norm}");
    }
}
