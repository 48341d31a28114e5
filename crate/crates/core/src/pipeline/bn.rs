//! Batch-normalization neck between the pooled embedding and the classifier.
//!
//! Training normalizes with batch statistics (biased variance) and folds the
//! batch statistics into the running estimates; inference normalizes with
//! the running estimates. Keeping the running variance biased makes
//! train-mode and infer-mode outputs agree once the running stats have
//! converged on a repeated batch.

use crate::error::{Error, Result};

/// Per-channel affine normalization state.
#[derive(Debug, Clone, PartialEq)]
pub struct BnNeck {
    pub gamma: Vec<f64>,
    pub shift: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub epsilon: f64,
}

/// Intermediates needed for the backward pass and running-stat update.
#[derive(Debug, Clone)]
pub struct BnCache {
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
    pub x_hat: Vec<f64>,
    pub batch: usize,
}

impl BnNeck {
    pub fn new(channels: usize) -> Self {
        BnNeck {
            gamma: vec![1.0; channels],
            shift: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            epsilon: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn check_input(&self, x: &[f64], batch: usize) -> Result<()> {
        if batch == 0 || x.len() != batch * self.channels() {
            return Err(Error::invalid(format!(
                "bn input of {} values does not match batch {} x {} channels",
                x.len(),
                batch,
                self.channels()
            )));
        }
        Ok(())
    }

    /// Train-mode forward over a `batch x channels` row-major matrix.
    /// Pure: running statistics are updated separately via
    /// [`BnNeck::update_running`].
    pub fn forward_train(&self, x: &[f64], batch: usize) -> Result<(Vec<f64>, BnCache)> {
        self.check_input(x, batch)?;
        let c = self.channels();
        let mut mean = vec![0.0; c];
        for row in 0..batch {
            for ch in 0..c {
                mean[ch] += x[row * c + ch];
            }
        }
        for m in &mut mean {
            *m /= batch as f64;
        }
        let mut var = vec![0.0; c];
        for row in 0..batch {
            for ch in 0..c {
                let d = x[row * c + ch] - mean[ch];
                var[ch] += d * d;
            }
        }
        for v in &mut var {
            *v /= batch as f64;
        }
        let mut x_hat = vec![0.0; batch * c];
        let mut out = vec![0.0; batch * c];
        for row in 0..batch {
            for ch in 0..c {
                let idx = row * c + ch;
                let xh = (x[idx] - mean[ch]) / (var[ch] + self.epsilon).sqrt();
                x_hat[idx] = xh;
                out[idx] = self.gamma[ch] * xh + self.shift[ch];
            }
        }
        Ok((
            out,
            BnCache {
                batch_mean: mean,
                batch_var: var,
                x_hat,
                batch,
            },
        ))
    }

    /// Folds one batch's statistics into the running estimates.
    pub fn update_running(&mut self, cache: &BnCache) {
        for ch in 0..self.channels() {
            self.running_mean[ch] = (1.0 - self.momentum) * self.running_mean[ch]
                + self.momentum * cache.batch_mean[ch];
            self.running_var[ch] = (1.0 - self.momentum) * self.running_var[ch]
                + self.momentum * cache.batch_var[ch];
        }
    }

    /// Inference-mode forward using the running statistics.
    pub fn forward_infer(&self, x: &[f64], batch: usize) -> Result<Vec<f64>> {
        self.check_input(x, batch)?;
        let c = self.channels();
        let mut out = vec![0.0; batch * c];
        for row in 0..batch {
            for ch in 0..c {
                let idx = row * c + ch;
                let xh =
                    (x[idx] - self.running_mean[ch]) / (self.running_var[ch] + self.epsilon).sqrt();
                out[idx] = self.gamma[ch] * xh + self.shift[ch];
            }
        }
        Ok(out)
    }

    /// Backward through the train-mode forward; returns `(grad_input,
    /// grad_gamma, grad_shift)`.
    pub fn backward(&self, cache: &BnCache, grad_out: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let c = self.channels();
        let b = cache.batch;
        debug_assert_eq!(grad_out.len(), b * c);
        let mut grad_gamma = vec![0.0; c];
        let mut grad_shift = vec![0.0; c];
        let mut sum_dy = vec![0.0; c];
        let mut sum_dy_xhat = vec![0.0; c];
        for row in 0..b {
            for ch in 0..c {
                let idx = row * c + ch;
                grad_gamma[ch] += grad_out[idx] * cache.x_hat[idx];
                grad_shift[ch] += grad_out[idx];
                sum_dy[ch] += grad_out[idx];
                sum_dy_xhat[ch] += grad_out[idx] * cache.x_hat[idx];
            }
        }
        let mut grad_in = vec![0.0; b * c];
        for row in 0..b {
            for ch in 0..c {
                let idx = row * c + ch;
                let inv_std = 1.0 / (cache.batch_var[ch] + self.epsilon).sqrt();
                grad_in[idx] = self.gamma[ch] * inv_std
                    * (grad_out[idx]
                        - sum_dy[ch] / b as f64
                        - cache.x_hat[idx] * sum_dy_xhat[ch] / b as f64);
            }
        }
        (grad_in, grad_gamma, grad_shift)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn train_output_is_normalized() {
        let bn = BnNeck::new(2);
        let x = vec![1.0, 10.0, 3.0, 20.0, 5.0, 30.0];
        let (y, cache) = bn.forward_train(&x, 3).unwrap();
        for ch in 0..2 {
            let mean: f64 = (0..3).map(|r| y[r * 2 + ch]).sum::<f64>() / 3.0;
            assert!(mean.abs() < 1e-12);
        }
        assert_eq!(cache.batch_mean, vec![3.0, 20.0]);
    }

    #[test]
    fn train_and_infer_agree_after_convergence() {
        let mut bn = BnNeck::new(3);
        let mut rng = crate::test_rng(5);
        let x: Vec<f64> = (0..4 * 3).map(|_| rng.random_range(-2.0..2.0)).collect();
        // Repeat the same batch until running stats converge on it.
        let mut train_out = Vec::new();
        for _ in 0..400 {
            let (y, cache) = bn.forward_train(&x, 4).unwrap();
            bn.update_running(&cache);
            train_out = y;
        }
        let infer_out = bn.forward_infer(&x, 4).unwrap();
        for (a, b) in train_out.iter().zip(&infer_out) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut bn = BnNeck::new(2);
        bn.gamma = vec![1.3, 0.8];
        bn.shift = vec![0.2, -0.4];
        let x = vec![0.3, -1.0, 1.7, 0.5, -0.6, 2.0, 0.9, -0.1];
        let b = 4;
        // Scalar objective: weighted sum of outputs.
        let w: Vec<f64> = (0..8).map(|i| 0.1 * (i as f64 + 1.0)).collect();
        let f = |bn: &BnNeck, x: &[f64]| {
            let (y, _) = bn.forward_train(x, b).unwrap();
            y.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>()
        };
        let (_, cache) = bn.forward_train(&x, b).unwrap();
        let (gx, gg, gs) = bn.backward(&cache, &w);
        let h = 1e-6;
        for i in 0..8 {
            let mut plus = x.clone();
            plus[i] += h;
            let mut minus = x.clone();
            minus[i] -= h;
            let fd = (f(&bn, &plus) - f(&bn, &minus)) / (2.0 * h);
            assert!((gx[i] - fd).abs() < 1e-6, "input {i}: {} vs {fd}", gx[i]);
        }
        for ch in 0..2 {
            let mut p = bn.clone();
            p.gamma[ch] += h;
            let mut m = bn.clone();
            m.gamma[ch] -= h;
            let fd = (f(&p, &x) - f(&m, &x)) / (2.0 * h);
            assert!((gg[ch] - fd).abs() < 1e-6);
            let mut p = bn.clone();
            p.shift[ch] += h;
            let mut m = bn.clone();
            m.shift[ch] -= h;
            let fd = (f(&p, &x) - f(&m, &x)) / (2.0 * h);
            assert!((gs[ch] - fd).abs() < 1e-6);
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let bn = BnNeck::new(3);
        assert!(bn.forward_train(&[0.0; 5], 2).is_err());
        assert!(bn.forward_infer(&[0.0; 5], 2).is_err());
        assert!(bn.forward_train(&[], 0).is_err());
    }
}
