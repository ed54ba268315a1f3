//! SGD and Adam over a [`ParamSet`].
//!
//! A step consumes the gradients accumulated by backward passes and zeroes
//! them afterwards. Stepping with any gradient missing is a contract
//! violation, not a silent no-op.

use super::{ParamSet, TensorError, TensorResult};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimKind {
    Sgd,
    Adam { beta1: f32, beta2: f32, eps: f32 },
}

pub struct Optimizer {
    kind: OptimKind,
    lr: f32,
    params: ParamSet,
    /// Adam first/second moments, one buffer per parameter, same order.
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: u64,
}

impl Optimizer {
    pub fn sgd(lr: f32, params: ParamSet) -> Self {
        Optimizer { kind: OptimKind::Sgd, lr, params, m: Vec::new(), v: Vec::new(), t: 0 }
    }

    /// Adam with β1 = 0.9, β2 = 0.999, ε = 1e-8.
    pub fn adam(lr: f32, params: ParamSet) -> Self {
        let m = params.iter().map(|p| vec![0.0; p.borrow().numel()]).collect();
        let v = params.iter().map(|p| vec![0.0; p.borrow().numel()]).collect();
        Optimizer {
            kind: OptimKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 },
            lr,
            params,
            m,
            v,
            t: 0,
        }
    }

    pub fn lr(&self) -> f32 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f32) {
        self.lr = lr;
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Apply one update from the accumulated gradients, then zero them.
    pub fn step(&mut self) -> TensorResult<()> {
        for p in self.params.iter() {
            if p.borrow().grad().is_none() {
                return Err(TensorError::MissingGrad(p.name().to_string()));
            }
        }
        self.t += 1;
        match self.kind {
            OptimKind::Sgd => {
                for p in self.params.iter() {
                    let mut t = p.borrow_mut();
                    let grad = t.grad().expect("checked").to_vec();
                    for (w, g) in t.data_mut().iter_mut().zip(&grad) {
                        *w -= self.lr * g;
                    }
                    t.clear_grad();
                }
            }
            OptimKind::Adam { beta1, beta2, eps } => {
                let bc1 = 1.0 - beta1.powi(self.t as i32);
                let bc2 = 1.0 - beta2.powi(self.t as i32);
                for (i, p) in self.params.iter().enumerate() {
                    let mut t = p.borrow_mut();
                    let grad = t.grad().expect("checked").to_vec();
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    for (((w, g), mi), vi) in
                        t.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut())
                    {
                        *mi = beta1 * *mi + (1.0 - beta1) * g;
                        *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                        let m_hat = *mi / bc1;
                        let v_hat = *vi / bc2;
                        *w -= self.lr * m_hat / (v_hat.sqrt() + eps);
                    }
                    t.clear_grad();
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Param, Tensor};

    fn single(value: f32, grad: Option<f32>) -> (Param, ParamSet) {
        let p = Param::new("p", Tensor::scalar(value));
        if let Some(g) = grad {
            p.borrow_mut().accumulate_grad(&[g]);
        }
        let set = ParamSet::new(vec![p.clone()]);
        (p, set)
    }

    #[test]
    fn sgd_single_step() {
        let (p, set) = single(2.0, Some(0.5));
        Optimizer::sgd(1.0, set).step().unwrap();
        assert_eq!(p.borrow().data()[0], 1.5);
        assert!(p.borrow().grad().is_none(), "grads zeroed after step");
    }

    #[test]
    fn sgd_zero_grad_leaves_param_unchanged() {
        let (p, set) = single(2.0, Some(0.0));
        Optimizer::sgd(1.0, set).step().unwrap();
        assert_eq!(p.borrow().data()[0], 2.0);
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        // at t=1, m_hat = g, v_hat = g², so the update is lr·sign(g) up to eps
        for &g in &[0.3f32, -2.0, 0.001] {
            let (p, set) = single(1.0, Some(g));
            Optimizer::adam(0.01, set).step().unwrap();
            let moved = 1.0 - p.borrow().data()[0];
            assert!(
                (moved - 0.01 * g.signum()).abs() < 1e-4,
                "grad {g}: moved {moved}, want ≈ {}",
                0.01 * g.signum()
            );
        }
    }

    #[test]
    fn missing_grad_is_contract_violation() {
        let (_, set) = single(1.0, None);
        let err = Optimizer::sgd(0.1, set).step().unwrap_err();
        assert!(matches!(err, TensorError::MissingGrad(_)));
    }
}
