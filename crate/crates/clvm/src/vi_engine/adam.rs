//! Adam optimizer over the flat parameter vector.

use crate::error::{ClvmError, Result};

/// First/second-moment accumulators plus hyperparameters.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(len: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// One ascent step: `values += lr · m̂ / (√v̂ + ε)` with bias-corrected
/// moment estimates. The gradient must point uphill (we maximize the bound).
pub fn adam_step(adam: &mut AdamState, values: &mut [f64], grad: &[f64]) -> Result<()> {
    if values.len() != adam.m.len() || grad.len() != adam.m.len() {
        return Err(ClvmError::Dimension(format!(
            "adam state sized {} but got values {} / grad {}",
            adam.m.len(),
            values.len(),
            grad.len()
        )));
    }
    adam.step += 1;
    let b1 = adam.beta1;
    let b2 = adam.beta2;
    let bc1 = 1.0 - b1.powi(adam.step as i32);
    let bc2 = 1.0 - b2.powi(adam.step as i32);
    for i in 0..values.len() {
        let g = grad[i];
        adam.m[i] = b1 * adam.m[i] + (1.0 - b1) * g;
        adam.v[i] = b2 * adam.v[i] + (1.0 - b2) * g * g;
        let m_hat = adam.m[i] / bc1;
        let v_hat = adam.v[i] / bc2;
        values[i] += adam.lr * m_hat / (v_hat.sqrt() + adam.eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn climbs_a_concave_quadratic() {
        // Maximize −(x−3)² from x = 0.
        let mut adam = AdamState::new(1, 0.05);
        let mut x = vec![0.0];
        for _ in 0..2000 {
            let g = vec![-2.0 * (x[0] - 3.0)];
            adam_step(&mut adam, &mut x, &g).unwrap();
        }
        assert!((x[0] - 3.0).abs() < 1e-3, "x = {}", x[0]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // With bias correction the very first update is lr·sign(g).
        let mut adam = AdamState::new(2, 0.01);
        let mut x = vec![0.0, 0.0];
        adam_step(&mut adam, &mut x, &[5.0, -0.002]).unwrap();
        assert!((x[0] - 0.01).abs() < 1e-6);
        assert!((x[1] + 0.01).abs() < 1e-6);
    }

    #[test]
    fn rejects_mismatched_lengths() {
        let mut adam = AdamState::new(3, 0.01);
        let mut x = vec![0.0; 3];
        assert!(adam_step(&mut adam, &mut x, &[1.0, 2.0]).is_err());
    }
}
