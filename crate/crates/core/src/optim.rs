//! SGD with Nesterov momentum and L2 weight decay.

use thiserror::Error;

use crate::param::Parameter;
use crate::tensor::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("optimizer state tracks {expected} parameters, got {got}")]
    ParamCount { expected: usize, got: usize },
    #[error("parameter {name}: value {value:?}, grad {grad:?}, velocity {velocity:?} shapes disagree")]
    Shape {
        name: String,
        value: Vec<usize>,
        grad: Vec<usize>,
        velocity: Vec<usize>,
    },
    #[error("invalid hyperparameter: {0}")]
    Hyper(String),
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub learning_rate: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: Vec<Tensor<f32>>,
}

impl OptimizerState {
    /// Zero velocity for every parameter of `params`.
    pub fn new(learning_rate: f32, momentum: f32, weight_decay: f32, params: &[Parameter]) -> Result<Self, OptimError> {
        if !(learning_rate.is_finite() && learning_rate > 0.0) {
            return Err(OptimError::Hyper(format!("learning rate must be positive, got {learning_rate}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(OptimError::Hyper(format!("momentum must be in [0, 1), got {momentum}")));
        }
        if !(weight_decay.is_finite() && weight_decay >= 0.0) {
            return Err(OptimError::Hyper(format!("weight decay must be non-negative, got {weight_decay}")));
        }
        Ok(OptimizerState {
            learning_rate,
            momentum,
            weight_decay,
            velocity: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
        })
    }

    pub fn velocity(&self) -> &[Tensor<f32>] {
        &self.velocity
    }
}

/// One Nesterov step on every trainable parameter:
///
/// ```text
/// g' = grad + weight_decay * w
/// v  = momentum * v - lr * g'
/// w  = w + momentum * v - lr * g'
/// ```
pub fn sgd_step(params: &mut [Parameter], opt: &mut OptimizerState) -> Result<(), OptimError> {
    if params.len() != opt.velocity.len() {
        return Err(OptimError::ParamCount {
            expected: opt.velocity.len(),
            got: params.len(),
        });
    }
    let (lr, rho, alpha) = (opt.learning_rate, opt.momentum, opt.weight_decay);
    for (p, v) in params.iter_mut().zip(opt.velocity.iter_mut()) {
        if p.value.shape() != p.grad.shape() || p.value.shape() != v.shape() {
            return Err(OptimError::Shape {
                name: p.name.clone(),
                value: p.value.shape().to_vec(),
                grad: p.grad.shape().to_vec(),
                velocity: v.shape().to_vec(),
            });
        }
        if !p.trainable {
            continue;
        }
        let grad = p.grad.data();
        for ((w, vel), &g) in p.value.data_mut().iter_mut().zip(v.data_mut()).zip(grad) {
            let g = g + alpha * *w;
            *vel = rho * *vel - lr * g;
            *w += rho * *vel - lr * g;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(w: f32, g: f32) -> Parameter {
        let mut p = Parameter::new("w", Tensor::scalar(w), true, true);
        p.grad = Tensor::scalar(g);
        p
    }

    #[test]
    fn plain_sgd_step() {
        let mut params = vec![scalar_param(1.0, 2.0)];
        let mut opt = OptimizerState::new(0.1, 0.0, 0.0, &params).unwrap();
        sgd_step(&mut params, &mut opt).unwrap();
        assert!((params[0].value.data()[0] - 0.8).abs() < 1e-7);
    }

    #[test]
    fn zero_gradient_leaves_weight_alone() {
        let mut params = vec![scalar_param(1.25, 0.0)];
        let mut opt = OptimizerState::new(0.1, 0.9, 0.0, &params).unwrap();
        sgd_step(&mut params, &mut opt).unwrap();
        assert_eq!(params[0].value.data()[0], 1.25);
    }

    #[test]
    fn nesterov_on_half_square_matches_recurrence() {
        // f(w) = w^2 / 2, grad = w.
        let (lr, rho) = (0.1f64, 0.9f64);
        let (mut w, mut v) = (1.0f64, 0.0f64);
        let mut expected = Vec::new();
        for _ in 0..2 {
            let g = w;
            v = rho * v - lr * g;
            w += rho * v - lr * g;
            expected.push(w);
        }
        // w1 = 1 - 0.09 - 0.1 = 0.81; v1 = -0.1
        assert!((expected[0] - 0.81).abs() < 1e-12);

        let mut params = vec![scalar_param(1.0, 0.0)];
        let mut opt = OptimizerState::new(lr as f32, rho as f32, 0.0, &params).unwrap();
        for want in expected {
            params[0].grad = params[0].value.clone();
            sgd_step(&mut params, &mut opt).unwrap();
            assert!((params[0].value.data()[0] as f64 - want).abs() < 1e-6);
        }
    }

    #[test]
    fn frozen_parameters_are_skipped() {
        let mut p = scalar_param(1.0, 5.0);
        p.trainable = false;
        let mut params = vec![p];
        let mut opt = OptimizerState::new(0.1, 0.9, 1e-5, &params).unwrap();
        sgd_step(&mut params, &mut opt).unwrap();
        assert_eq!(params[0].value.data()[0], 1.0);
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        assert!(OptimizerState::new(0.0, 0.9, 0.0, &[]).is_err());
        assert!(OptimizerState::new(0.1, 1.0, 0.0, &[]).is_err());
        assert!(OptimizerState::new(0.1, 0.9, -1.0, &[]).is_err());
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut p = scalar_param(1.0, 1.0);
        p.grad = Tensor::zeros(&[2]);
        let mut params = vec![p];
        let mut opt = OptimizerState::new(0.1, 0.9, 0.0, &params).unwrap();
        assert!(matches!(sgd_step(&mut params, &mut opt), Err(OptimError::Shape { .. })));
    }
}
