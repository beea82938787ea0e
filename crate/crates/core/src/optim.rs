use crate::error::{Error, Result};

/// Adam with bias correction. Moments are kept in f64 regardless of how the
/// model stores its parameters, so repeated runs accumulate identically.
#[derive(Debug, Clone)]
pub struct Adam {
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(learning_rate: f64, parameter_count: usize) -> Result<Self> {
        if !(learning_rate.is_finite() && learning_rate > 0.0) {
            return Err(Error::InvalidInput(format!(
                "learning rate must be positive and finite, got {learning_rate}"
            )));
        }
        Ok(Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: vec![0.0; parameter_count],
            v: vec![0.0; parameter_count],
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Advance one step and return the additive parameter deltas
    /// `-lr * m_hat / (sqrt(v_hat) + eps)`.
    pub fn deltas(&mut self, grad: &[f64]) -> Result<Vec<f64>> {
        if grad.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "gradient has {} entries for {} moments",
                grad.len(),
                self.m.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let mut deltas = vec![0.0; grad.len()];
        for i in 0..grad.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            deltas[i] = -self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        Ok(deltas)
    }
}
