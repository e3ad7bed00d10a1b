use serde::{Deserialize, Serialize};

use super::tensor::ParamState;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.lr > 0.0
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::arg(format!("invalid AdamW hyperparameters {self:?}")))
        }
    }
}

/// One decoupled-weight-decay Adam update using `param.grad`:
///
/// ```text
/// m <- b1 m + (1 - b1) g        v <- b2 v + (1 - b2) g^2
/// theta <- theta - lr (m_hat / (sqrt(v_hat) + eps) + wd theta)
/// ```
///
/// with bias correction at `t = step_count + 1`.
pub fn adamw_step(param: &mut ParamState, cfg: &AdamWConfig) -> Result<()> {
    cfg.validate()?;
    if let Some((i, g)) = param.grad.data().iter().enumerate().find(|(_, g)| !g.is_finite()) {
        return Err(Error::Optimizer(format!("non-finite gradient {g} at element {i}")));
    }
    let t = param.step_count + 1;
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    let ParamState {
        value,
        grad,
        adam_m,
        adam_v,
        ..
    } = param;
    for (((theta, &g), m), v) in value
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(adam_m.data_mut())
        .zip(adam_v.data_mut())
    {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *theta -= cfg.lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * *theta);
    }
    param.step_count = t;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    fn cfg(wd: f64) -> AdamWConfig {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: wd,
        }
    }

    #[test]
    fn single_step_closed_form() {
        let mut p = ParamState::new(Tensor::scalar(1.0));
        p.grad = Tensor::scalar(1.0);
        adamw_step(&mut p, &cfg(0.01)).unwrap();
        let expect = 1.0 - 1e-3 * (1.0 / (1.0 + 1e-8) + 0.01);
        assert!((p.value.data()[0] - expect).abs() < 1e-15);
        assert!((p.value.data()[0] - 0.99899).abs() < 1e-9);
        assert_eq!(p.step_count, 1);
    }

    #[test]
    fn zero_gradient_no_decay_is_noop() {
        let mut p = ParamState::new(Tensor::vector(vec![0.3, -2.0]));
        for _ in 0..5 {
            adamw_step(&mut p, &cfg(0.0)).unwrap();
        }
        assert_eq!(p.value.data(), &[0.3, -2.0]);
    }

    #[test]
    fn adam_without_decay_single_step() {
        // With wd = 0 the first step moves by lr * g / (|g| + eps).
        let mut p = ParamState::new(Tensor::scalar(1.0));
        p.grad = Tensor::scalar(-4.0);
        adamw_step(&mut p, &cfg(0.0)).unwrap();
        assert!((p.value.data()[0] - (1.0 + 1e-3 * 4.0 / (4.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut p = ParamState::new(Tensor::scalar(1.0));
        p.grad = Tensor::scalar(f64::NAN);
        assert!(matches!(adamw_step(&mut p, &cfg(0.0)), Err(Error::Optimizer(_))));
        assert!(adamw_step(&mut ParamState::new(Tensor::scalar(1.0)), &AdamWConfig { beta1: 1.0, ..cfg(0.0) }).is_err());
    }
}
