//! Adam with a cosine-annealed learning rate.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr_initial: f64,
    pub lr_final: f64,
    pub total_iters: usize,
    pub crop_size: usize,
    pub augment: bool,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr_initial: 4e-4,
            lr_final: 1e-7,
            total_iters: 2000,
            crop_size: 32,
            augment: true,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.lr_final && self.lr_final < self.lr_initial) {
            return Err(Error::config(format!(
                "need 0 < lr_final < lr_initial, got {} and {}",
                self.lr_final, self.lr_initial
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("Adam betas must lie in [0, 1)"));
        }
        if self.total_iters == 0 {
            return Err(Error::config("total_iters must be positive"));
        }
        if self.crop_size == 0 {
            return Err(Error::config("crop_size must be positive"));
        }
        Ok(())
    }
}

/// Cosine annealing from `lr_initial` at iteration 0 to `lr_final` at
/// `total_iters`. Written as a convex combination so both endpoints are exact.
pub fn cosine_lr(iter: usize, cfg: &OptimizerConfig) -> Result<f64> {
    if iter > cfg.total_iters {
        return Err(Error::arg(format!("iteration {iter} beyond schedule of {}", cfg.total_iters)));
    }
    let w = 0.5 * (1.0 + (std::f64::consts::PI * iter as f64 / cfg.total_iters as f64).cos());
    Ok(cfg.lr_initial * w + cfg.lr_final * (1.0 - w))
}

/// First and second moment estimates for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamMoments<T> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub moments: Vec<AdamMoments<T>>,
    /// Number of completed steps.
    pub step: usize,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[&Tensor<T>]) -> Self {
        let moments = params
            .iter()
            .map(|p| AdamMoments {
                m: Tensor::full(p.shape().to_vec(), T::zero()).unwrap(),
                v: Tensor::full(p.shape().to_vec(), T::zero()).unwrap(),
            })
            .collect();
        Self { moments, step: 0 }
    }
}

/// One bias-corrected Adam update with the learning rate of step `iter`.
/// Returns the learning rate used.
pub fn adam_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    cfg: &OptimizerConfig,
    iter: usize,
) -> Result<f64> {
    if params.len() != grads.len() || params.len() != state.moments.len() {
        return Err(Error::shape(format!(
            "adam: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.moments.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.moments[i].m.shape() {
            return Err(Error::shape(format!(
                "adam slot {i}: param {:?}, grad {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    let lr = cosine_lr(iter, cfg)?;
    let t = (state.step + 1) as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    let (b1t, b2t) = (T::lit(b1), T::lit(b2));
    let (lr_t, eps_t, bc1_t, bc2_t) = (T::lit(lr), T::lit(cfg.eps), T::lit(bc1), T::lit(bc2));
    for ((p, g), mom) in params.iter_mut().zip(grads).zip(state.moments.iter_mut()) {
        let (m, v) = (mom.m.data_mut(), mom.v.data_mut());
        for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1t * *mi + (T::one() - b1t) * gi;
            *vi = b2t * *vi + (T::one() - b2t) * gi * gi;
            let m_hat = *mi / bc1_t;
            let v_hat = *vi / bc2_t;
            *pi -= lr_t * m_hat / (v_hat.sqrt() + eps_t);
        }
    }
    state.step += 1;
    Ok(lr)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints_and_midpoint() {
        let cfg = OptimizerConfig { total_iters: 1000, ..Default::default() };
        assert_eq!(cosine_lr(0, &cfg).unwrap(), 4e-4);
        assert_eq!(cosine_lr(1000, &cfg).unwrap(), 1e-7);
        let mid = cosine_lr(500, &cfg).unwrap();
        assert!((mid - (4e-4 + 1e-7) / 2.0).abs() < 1e-18);
        assert!((mid - 2.0005e-4).abs() < 1e-12);
        assert!(cosine_lr(1001, &cfg).is_err());
    }

    #[test]
    fn schedule_is_monotone() {
        let cfg = OptimizerConfig { total_iters: 50, ..Default::default() };
        let lrs: Vec<f64> = (0..=50).map(|i| cosine_lr(i, &cfg).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let cfg = OptimizerConfig::default();
        let mut p = Tensor::<f64>::full([3], 0.7).unwrap();
        let orig = p.clone();
        let g = Tensor::<f64>::zeros([3]).unwrap();
        let mut st = AdamState::new(&[&p]);
        adam_step(&mut [&mut p], &[g], &mut st, &cfg, 0).unwrap();
        assert_eq!(p, orig);
    }

    #[test]
    fn one_step_matches_hand_algebra() {
        let cfg = OptimizerConfig::default();
        let g = 0.37;
        let mut p = Tensor::<f64>::full([1], 1.5).unwrap();
        let mut st = AdamState::new(&[&p]);
        let lr = adam_step(&mut [&mut p], &[Tensor::full([1], g).unwrap()], &mut st, &cfg, 0).unwrap();
        assert_eq!(lr, 4e-4);
        // m_hat = g and v_hat = g^2 after one bias-corrected step
        let expected = 1.5 - 4e-4 * g / (g.abs() + 1e-8);
        assert!((p.item() - expected).abs() < 1e-12);
        assert!(((1.5 - p.item()) - 4e-4).abs() < 1e-10);
    }

    #[test]
    fn rejects_shape_mismatch() {
        let cfg = OptimizerConfig::default();
        let mut p = Tensor::<f64>::zeros([2]).unwrap();
        let mut st = AdamState::new(&[&p]);
        let r = adam_step(&mut [&mut p], &[Tensor::zeros([3]).unwrap()], &mut st, &cfg, 0);
        assert!(r.is_err());
    }

    #[test]
    fn validation() {
        let bad = OptimizerConfig { lr_final: 1e-3, ..Default::default() };
        assert!(bad.validate().is_err());
        assert!(OptimizerConfig::default().validate().is_ok());
    }
}
