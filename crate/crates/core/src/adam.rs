//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One Adam step in place. A non-finite gradient aborts before anything is
/// modified.
pub fn adam_update(params: &mut [f64], grad: &[f64], state: &mut AdamState, lr: f64, cfg: AdamConfig) -> Result<()> {
    if params.len() != grad.len() || state.m.len() != params.len() {
        return Err(Error::DimensionMismatch {
            what: "adam update",
            expected: params.len(),
            got: grad.len(),
        });
    }
    if !grad.iter().all(|g| g.is_finite()) {
        return Err(Error::NonFinite("gradient".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grad)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![1.0, -2.0, 3.5];
        let mut s = AdamState::new(3);
        adam_update(&mut p, &[0.0; 3], &mut s, 0.1, AdamConfig::default()).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.5]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![0.0];
        let mut s = AdamState::new(1);
        adam_update(&mut p, &[1.0], &mut s, 0.1, AdamConfig::default()).unwrap();
        assert!((p[0] + 0.1).abs() < 1e-6, "{}", p[0]);
    }

    /// Scalar reference written without the vectorized loop.
    fn reference_quadratic(steps: usize, lr: f64) -> f64 {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut w, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        for k in 1..=steps {
            let g = 2.0 * (w - 3.0);
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(k as i32));
            let vh = v / (1.0 - b2.powi(k as i32));
            w -= lr * mh / (vh.sqrt() + eps);
        }
        w
    }

    #[test]
    fn minimizes_scalar_quadratic() {
        let mut w = vec![0.0];
        let mut s = AdamState::new(1);
        for _ in 0..100 {
            let g = [2.0 * (w[0] - 3.0)];
            adam_update(&mut w, &g, &mut s, 0.1, AdamConfig::default()).unwrap();
        }
        let want = reference_quadratic(100, 0.1);
        assert_eq!(w[0], want);
        assert!((w[0] - 3.0).abs() < 0.05, "w = {}", w[0]);
    }

    #[test]
    fn non_finite_gradient_is_an_error() {
        let mut p = vec![0.0, 1.0];
        let mut s = AdamState::new(2);
        let err = adam_update(&mut p, &[f64::NAN, 0.0], &mut s, 0.1, AdamConfig::default());
        assert!(matches!(err, Err(Error::NonFinite(_))));
        assert_eq!(p, vec![0.0, 1.0]);
        assert_eq!(s.step(), 0);
    }
}
