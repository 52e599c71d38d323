//! Bias-corrected Adam.

use crate::error::{Error, Result};

/// First/second moment buffers plus the shared timestep.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    /// Completed steps; bias correction uses `t + 1` internally.
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// One standard bias-corrected Adam update, in place.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::ShapeMismatch(format!(
            "params {}, grads {}, state {}",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let t = state.t as f64;
    let bc1 = 1.0 - beta1.powf(t);
    let bc2 = 1.0 - beta2.powf(t);
    for i in 0..params.len() {
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * grads[i];
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * grads[i] * grads[i];
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = vec![1.0, -2.0, 0.5];
        let mut state = AdamState::new(3);
        adam_step(&mut p, &[0.0; 3], &mut state, 0.001, 0.9, 0.999, 1e-8).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn first_step_scalar_trace() {
        // hand trace: g=1 -> m_hat = 1, v_hat = 1, delta = -lr / (1 + eps)
        let mut p = vec![0.0];
        let mut state = AdamState::new(1);
        adam_step(&mut p, &[1.0], &mut state, 0.001, 0.9, 0.999, 1e-8).unwrap();
        let expect = -0.001 / (1.0 + 1e-8);
        assert!((p[0] - expect).abs() < 1e-12, "got {}", p[0]);
    }

    #[test]
    fn constant_gradient_moves_monotonically() {
        let mut p = vec![0.0];
        let mut state = AdamState::new(1);
        let mut prev = 0.0;
        for _ in 0..5 {
            adam_step(&mut p, &[2.5], &mut state, 0.001, 0.9, 0.999, 1e-8).unwrap();
            assert!(p[0] < prev);
            prev = p[0];
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = vec![0.0; 2];
        let mut state = AdamState::new(3);
        assert!(adam_step(&mut p, &[0.0; 2], &mut state, 0.001, 0.9, 0.999, 1e-8).is_err());
    }
}
