//! SGD, heavy-ball momentum and Adam over flat parameter vectors.

use crate::autodiff::ParamVector;
use crate::rl::RlError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerConfig {
    Sgd { lr: f64 },
    /// v ← β·v − η·g; θ ← θ + v. Equivalently
    /// θ_{t+1} = θ_t − η·g_t + β(θ_t − θ_{t−1}).
    HeavyBall { lr: f64, beta: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerConfig {
    /// The pretraining optimizer: Adam(2.5e-4, β₁=0.9, β₂=0.999, ε=1e-8).
    pub fn adam_pretrain() -> Self {
        OptimizerConfig::Adam { lr: 2.5e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Sgd { lr }
            | OptimizerConfig::HeavyBall { lr, .. }
            | OptimizerConfig::Adam { lr, .. } => lr,
        }
    }

    /// Momentum decay rate; zero for plain SGD and Adam.
    pub fn momentum_beta(&self) -> f64 {
        match *self {
            OptimizerConfig::HeavyBall { beta, .. } => beta,
            _ => 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let lr = self.lr();
        if !(lr > 0.0) {
            return Err(format!("learning rate {lr} must be positive"));
        }
        if let OptimizerConfig::HeavyBall { beta, .. } = *self {
            if !(0.0..1.0).contains(&beta) {
                return Err(format!("momentum beta {beta} must be in [0, 1)"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub enum OptimizerState {
    Sgd,
    HeavyBall { velocity: Vec<f32> },
    Adam { m: Vec<f32>, v: Vec<f32>, t: u64 },
}

impl OptimizerState {
    pub fn new(config: &OptimizerConfig, dim: usize) -> Self {
        match config {
            OptimizerConfig::Sgd { .. } => OptimizerState::Sgd,
            OptimizerConfig::HeavyBall { .. } => OptimizerState::HeavyBall { velocity: vec![0.0; dim] },
            OptimizerConfig::Adam { .. } => {
                OptimizerState::Adam { m: vec![0.0; dim], v: vec![0.0; dim], t: 0 }
            }
        }
    }
}

/// One optimizer step in place. The state must have been created for the
/// same config kind and parameter length.
pub fn optimizer_step(
    config: &OptimizerConfig,
    state: &mut OptimizerState,
    params: &mut ParamVector,
    grad: &ParamVector,
) -> Result<(), RlError> {
    if !params.same_layout(grad) {
        return Err(RlError::StateMismatch);
    }
    let n = params.len();
    match (config, state) {
        (OptimizerConfig::Sgd { lr }, OptimizerState::Sgd) => {
            let lr = *lr as f32;
            for (p, &g) in params.values_mut().iter_mut().zip(grad.values()) {
                *p -= lr * g;
            }
        }
        (OptimizerConfig::HeavyBall { lr, beta }, OptimizerState::HeavyBall { velocity }) => {
            if velocity.len() != n {
                return Err(RlError::StateMismatch);
            }
            let (lr, beta) = (*lr as f32, *beta as f32);
            for ((p, v), &g) in params.values_mut().iter_mut().zip(velocity).zip(grad.values()) {
                *v = beta * *v - lr * g;
                *p += *v;
            }
        }
        (OptimizerConfig::Adam { lr, beta1, beta2, eps }, OptimizerState::Adam { m, v, t }) => {
            if m.len() != n || v.len() != n {
                return Err(RlError::StateMismatch);
            }
            let (lr, beta1, beta2, eps) = (*lr as f32, *beta1 as f32, *beta2 as f32, *eps as f32);
            *t += 1;
            let bc1 = 1.0 - beta1.powi(*t as i32);
            let bc2 = 1.0 - beta2.powi(*t as i32);
            for ((p, (mi, vi)), &g) in params
                .values_mut()
                .iter_mut()
                .zip(m.iter_mut().zip(v.iter_mut()))
                .zip(grad.values())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * g;
                *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        _ => return Err(RlError::StateMismatch),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Layout;
    use std::sync::Arc;

    fn scalar_params(v: f32) -> ParamVector {
        let layout = Arc::new(Layout::new(&[("theta", vec![1])]));
        ParamVector::new(layout, vec![v]).unwrap()
    }

    fn scalar_grad(p: &ParamVector, g: f32) -> ParamVector {
        ParamVector::new(Arc::clone(p.layout()), vec![g]).unwrap()
    }

    /// Runs heavy-ball on f = ½λθ² from θ₀ = 1 and reports whether |θ|
    /// stays bounded by 1e6 over `steps` iterations, plus the final |θ|.
    fn heavy_ball_run(lambda: f32, lr: f64, beta: f64, steps: usize) -> (bool, f32) {
        let config = OptimizerConfig::HeavyBall { lr, beta };
        let mut state = OptimizerState::new(&config, 1);
        let mut params = scalar_params(1.0);
        for _ in 0..steps {
            let theta = params.values()[0];
            if !theta.is_finite() || theta.abs() > 1e6 {
                return (false, theta.abs());
            }
            let grad = scalar_grad(&params, lambda * theta);
            optimizer_step(&config, &mut state, &mut params, &grad).unwrap();
        }
        let theta = params.values()[0].abs();
        (theta.is_finite() && theta <= 1e6, theta)
    }

    #[test]
    fn sgd_step() {
        let config = OptimizerConfig::Sgd { lr: 0.01 };
        let mut state = OptimizerState::new(&config, 1);
        let mut params = scalar_params(0.0);
        let grad = scalar_grad(&params, 1.0);
        optimizer_step(&config, &mut state, &mut params, &grad).unwrap();
        assert_eq!(params.values()[0], -0.01);
    }

    #[test]
    fn heavy_ball_converges_below_threshold() {
        // (2+2·0.8)/0.01 = 360; λ = 350 < 360 → contraction to 0.
        let (bounded, theta) = heavy_ball_run(350.0, 0.01, 0.8, 10_000);
        assert!(bounded);
        assert!(theta < 1e-6, "expected decay, got {theta}");
    }

    #[test]
    fn heavy_ball_diverges_above_threshold() {
        let (bounded, theta) = heavy_ball_run(370.0, 0.01, 0.8, 10_000);
        assert!(!bounded, "expected divergence, final {theta}");
    }

    #[test]
    fn adam_decreases_quadratic() {
        let config = OptimizerConfig::adam_pretrain();
        let mut state = OptimizerState::new(&config, 1);
        let mut params = scalar_params(1.0);
        for _ in 0..20_000 {
            let theta = params.values()[0];
            let grad = scalar_grad(&params, 2.0 * theta);
            optimizer_step(&config, &mut state, &mut params, &grad).unwrap();
        }
        assert!(params.values()[0].abs() < 1e-2);
    }

    #[test]
    fn kind_mismatch_rejected() {
        let config = OptimizerConfig::Sgd { lr: 0.1 };
        let mut state = OptimizerState::new(&OptimizerConfig::HeavyBall { lr: 0.1, beta: 0.5 }, 1);
        let mut params = scalar_params(0.0);
        let grad = scalar_grad(&params, 1.0);
        assert!(matches!(
            optimizer_step(&config, &mut state, &mut params, &grad),
            Err(RlError::StateMismatch)
        ));
    }

    #[test]
    fn config_validation() {
        assert!(OptimizerConfig::Sgd { lr: 0.0 }.validate().is_err());
        assert!(OptimizerConfig::HeavyBall { lr: 0.01, beta: 1.0 }.validate().is_err());
        assert!(OptimizerConfig::HeavyBall { lr: 0.01, beta: 0.8 }.validate().is_ok());
    }
}
