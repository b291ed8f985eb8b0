//! Parameter updates: plain SGD and Adam with bias correction.

use super::{Result, Tensor, TensorError};

enum Rule {
    Sgd,
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
        m: Vec<Vec<f64>>,
        v: Vec<Vec<f64>>,
    },
}

/// Owns handles to the trainable parameters and applies updates in
/// registration order.
pub struct Optimizer {
    params: Vec<Tensor>,
    lr: f64,
    rule: Rule,
    step_count: u64,
}

impl Optimizer {
    pub fn sgd(params: Vec<Tensor>, lr: f64) -> Optimizer {
        Optimizer {
            params,
            lr,
            rule: Rule::Sgd,
            step_count: 0,
        }
    }

    /// Adam with the customary defaults `beta1 = 0.9`, `beta2 = 0.999`,
    /// `eps = 1e-8`.
    pub fn adam(params: Vec<Tensor>, lr: f64) -> Optimizer {
        Optimizer::adam_with(params, lr, 0.9, 0.999, 1e-8)
    }

    pub fn adam_with(params: Vec<Tensor>, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Optimizer {
        let m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        let v = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        Optimizer {
            params,
            lr,
            rule: Rule::Adam {
                beta1,
                beta2,
                eps,
                m,
                v,
            },
            step_count: 0,
        }
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// Applies one update from the gradients currently stored on the
    /// parameters. Fails if any registered parameter has no gradient.
    pub fn step(&mut self) -> Result<()> {
        for (i, p) in self.params.iter().enumerate() {
            if p.grad().is_none() {
                return Err(TensorError::MissingGrad { index: i });
            }
        }
        self.step_count += 1;
        let lr = self.lr;
        match &mut self.rule {
            Rule::Sgd => {
                for p in &self.params {
                    p.update_with_grad(|value, grad, _| *value -= lr * grad);
                }
            }
            Rule::Adam {
                beta1,
                beta2,
                eps,
                m,
                v,
            } => {
                let t = self.step_count as i32;
                let bc1 = 1.0 - beta1.powi(t);
                let bc2 = 1.0 - beta2.powi(t);
                let (b1, b2, eps) = (*beta1, *beta2, *eps);
                for (p, (pm, pv)) in self.params.iter().zip(m.iter_mut().zip(v.iter_mut())) {
                    p.update_with_grad(|value, grad, i| {
                        pm[i] = b1 * pm[i] + (1.0 - b1) * grad;
                        pv[i] = b2 * pv[i] + (1.0 - b2) * grad * grad;
                        let m_hat = pm[i] / bc1;
                        let v_hat = pv[i] / bc2;
                        *value -= lr * m_hat / (v_hat.sqrt() + eps);
                    });
                }
            }
        }
        Ok(())
    }

    /// Resets all parameter gradients to zero buffers.
    pub fn zero_grad(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(value: f64, grad: f64) -> Tensor {
        let p = Tensor::scalar(value).with_grad();
        p.accumulate_grad(&[grad]);
        p
    }

    #[test]
    fn sgd_step_moves_against_gradient() {
        let p = param(1.0, 2.0);
        let mut opt = Optimizer::sgd(vec![p.clone()], 0.1);
        opt.step().unwrap();
        assert!((p.scalar_value() - 0.8).abs() < 1e-15);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        // with bias correction the first update equals lr / (1 + eps/|g|...)
        let p = param(3.0, 1.0);
        let mut opt = Optimizer::adam(vec![p.clone()], 0.001);
        opt.step().unwrap();
        let delta = p.scalar_value() - 3.0;
        assert!((delta + 0.001).abs() < 1e-6, "delta {delta}");
    }

    #[test]
    fn adam_first_step_sign_follows_gradient() {
        let p = param(0.0, -4.0);
        let mut opt = Optimizer::adam(vec![p.clone()], 0.001);
        opt.step().unwrap();
        assert!((p.scalar_value() - 0.001).abs() < 1e-6);
    }

    #[test]
    fn step_without_gradient_fails_with_index() {
        let with = param(1.0, 1.0);
        let without = Tensor::scalar(1.0).with_grad();
        let mut opt = Optimizer::sgd(vec![with, without], 0.1);
        match opt.step() {
            Err(TensorError::MissingGrad { index }) => assert_eq!(index, 1),
            other => panic!("expected MissingGrad, got {other:?}"),
        }
        assert_eq!(opt.step_count(), 0);
    }

    #[test]
    fn zero_grad_resets_buffers() {
        let p = param(1.0, 5.0);
        let opt = Optimizer::sgd(vec![p.clone()], 0.1);
        opt.zero_grad();
        assert_eq!(p.grad().unwrap(), vec![0.0]);
    }

    #[test]
    fn adam_updates_are_deterministic() {
        let run = || {
            let p = Tensor::new(&[3], vec![0.5, -0.2, 1.0]).unwrap().with_grad();
            let mut opt = Optimizer::adam(vec![p.clone()], 0.01);
            for step in 0..5 {
                opt.zero_grad();
                p.accumulate_grad(&[0.1 * step as f64, -0.3, 0.7]);
                opt.step().unwrap();
            }
            p.to_vec()
        };
        assert_eq!(run(), run());
    }
}
