use crate::error::{Error, Result};
use crate::scalar::Real;

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
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

/// Adam optimizer state: first and second moments plus step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub first: Vec<T>,
    pub second: Vec<T>,
    pub step: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Self {
            config,
            first: vec![T::zero(); len],
            second: vec![T::zero(); len],
            step: 0,
        }
    }

    /// One bias-corrected update of `params` in place.
    pub fn step(&mut self, params: &mut [T], grads: &[T], lr: T) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(Error::Dimension(format!(
                "adam state has {} entries, got {} params and {} grads",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let b1 = T::lit(self.config.beta1);
        let b2 = T::lit(self.config.beta2);
        let eps = T::lit(self.config.eps);
        let t = self.step as i32;
        let c1 = T::one() - b1.powi(t);
        let c2 = T::one() - b2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.first[i] = b1 * self.first[i] + (T::one() - b1) * g;
            self.second[i] = b2 * self.second[i] + (T::one() - b2) * g * g;
            let m_hat = self.first[i] / c1;
            let v_hat = self.second[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_is_signed_learning_rate() {
        let mut adam = Adam::<f64>::new(4, AdamConfig::default());
        let mut x = vec![0.0; 4];
        let g = [3.0, -0.5, 1e-2, -40.0];
        adam.step(&mut x, &g, 1e-3).unwrap();
        for (xi, gi) in x.iter().zip(g) {
            let expected = -1e-3 * gi / (gi.abs() + 1e-8);
            assert!((xi - expected).abs() < 1e-15);
            assert!((xi + 1e-3 * gi.signum()).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut adam = Adam::<f64>::new(2, AdamConfig::default());
        let mut x = vec![1.0, 2.0];
        adam.step(&mut x, &[1.0, -1.0], 0.1).unwrap();
        let before = x.clone();
        let (m, v) = (adam.first.clone(), adam.second.clone());
        adam.first.iter_mut().for_each(|m| *m = 0.0);
        adam.second.iter_mut().for_each(|v| *v = 0.0);
        adam.step(&mut x, &[0.0, 0.0], 0.1).unwrap();
        assert_eq!(x, before);
        // with live moments, a zero gradient still decays them
        adam.first = m.clone();
        adam.second = v.clone();
        let mut y = x.clone();
        adam.step(&mut y, &[0.0, 0.0], 0.0).unwrap();
        assert_eq!(y, x);
        for i in 0..2 {
            assert!((adam.first[i] - 0.9 * m[i]).abs() < 1e-15);
            assert!((adam.second[i] - 0.999 * v[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut adam = Adam::<f64>::new(5, AdamConfig::default());
        let mut x = vec![1.0; 5];
        let mut steps = 0;
        while x.iter().map(|v| v * v).sum::<f64>().sqrt() >= 1e-3 {
            let g: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
            adam.step(&mut x, &g, 1e-2).unwrap();
            steps += 1;
            assert!(steps <= 2000, "not converged after 2000 steps: {x:?}");
        }
    }

    #[test]
    fn dimension_mismatch() {
        let mut adam = Adam::<f32>::new(2, AdamConfig::default());
        assert!(adam.step(&mut [0.0; 3], &[0.0; 3], 1e-3).is_err());
    }
}
