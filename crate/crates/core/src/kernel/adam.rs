use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
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

/// Moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<S> {
    pub m: Vec<S>,
    pub v: Vec<S>,
    pub step: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![S::zero(); len],
            v: vec![S::zero(); len],
            step: 0,
        }
    }
}

/// One bias-corrected Adam step applied in place.
pub fn adam_update<S: Scalar>(
    param: &mut [S],
    grad: &[S],
    state: &mut AdamState<S>,
    cfg: &AdamConfig,
) -> Result<()> {
    if param.len() != grad.len() || state.m.len() != param.len() || state.v.len() != param.len() {
        return Err(Error::LengthMismatch {
            context: "adam_update",
            left: param.len(),
            right: grad.len().min(state.m.len()).min(state.v.len()),
        });
    }
    state.step += 1;
    let b1 = S::lit(cfg.beta1);
    let b2 = S::lit(cfg.beta2);
    let lr = S::lit(cfg.lr);
    let eps = S::lit(cfg.eps);
    let t = state.step as i32;
    let c1 = S::one() - b1.powi(t);
    let c2 = S::one() - b2.powi(t);
    for i in 0..param.len() {
        let g = grad[i];
        state.m[i] = b1 * state.m[i] + (S::one() - b1) * g;
        state.v[i] = b2 * state.v[i] + (S::one() - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        param[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_leaves_param() {
        let mut p = vec![1.5f64, -2.0];
        let mut st = AdamState::new(2);
        adam_update(&mut p, &[0.0, 0.0], &mut st, &AdamConfig::default()).unwrap();
        assert_eq!(p, vec![1.5, -2.0]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![0.0f64];
        let mut st = AdamState::new(1);
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        adam_update(&mut p, &[1.0], &mut st, &cfg).unwrap();
        // m̂ = 1, v̂ = 1 after bias correction
        assert!((p[0] + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn deterministic_and_checked() {
        let run = || {
            let mut p = vec![0.3f64, 0.7];
            let mut st = AdamState::new(2);
            for _ in 0..3 {
                adam_update(&mut p, &[0.2, -0.4], &mut st, &AdamConfig::default()).unwrap();
            }
            (p, st)
        };
        assert_eq!(run(), run());
        let mut st = AdamState::<f64>::new(1);
        assert!(adam_update(&mut [0.0, 1.0], &[0.0, 1.0], &mut st, &AdamConfig::default()).is_err());
    }
}
