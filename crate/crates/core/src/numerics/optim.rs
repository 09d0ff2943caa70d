use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Bias-corrected Adam.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub lr: f64,
    pub b1: f64,
    pub b2: f64,
    pub eps: f64,
    t: u64,
    moments: HashMap<ParamId, (Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(lr: f64) -> Self {
        Self::with_betas(lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(lr: f64, b1: f64, b2: f64, eps: f64) -> Self {
        Self {
            lr,
            b1,
            b2,
            eps,
            t: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Updates `ids` from their accumulated grads, then zeroes every grad in the store.
    pub fn step(&mut self, store: &mut ParamStore<T>, ids: &[ParamId]) -> Result<()> {
        if self.lr < 0.0 || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate {} is invalid", self.lr)));
        }
        for &id in ids {
            let p = store.get(id);
            if !p.grad.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("gradient of parameter {}", p.name()),
                });
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2) = (T::of(self.b1), T::of(self.b2));
        let c1 = T::of(1.0 - self.b1.powi(t));
        let c2 = T::of(1.0 - self.b2.powi(t));
        let (lr, eps) = (T::of(self.lr), T::of(self.eps));
        for &id in ids {
            let shape = store.value(id).shape().to_vec();
            let (m, v) = self
                .moments
                .entry(id)
                .or_insert_with(|| (Tensor::zeros(&shape), Tensor::zeros(&shape)));
            let p = store.get_mut(id);
            let grad = p.grad.data();
            let value = p.value.data_mut();
            for (((x, &g), mi), vi) in value
                .iter_mut()
                .zip(grad)
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *mi = b1 * *mi + (T::one() - b1) * g;
                *vi = b2 * *vi + (T::one() - b2) * g * g;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *x = *x - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        store.zero_grads();
        Ok(())
    }
}

/// Plain gradient descent on `ids`, then zero every grad.
pub fn sgd_step<T: Scalar>(store: &mut ParamStore<T>, ids: &[ParamId], lr: f64) -> Result<()> {
    let lr = T::of(lr);
    for &id in ids {
        let p = store.get_mut(id);
        if !p.grad.is_finite() {
            return Err(Error::NonFinite {
                context: format!("gradient of parameter {}", p.name()),
            });
        }
        let grad = p.grad.data().to_vec();
        for (x, g) in p.value.data_mut().iter_mut().zip(grad) {
            *x = *x - lr * g;
        }
    }
    store.zero_grads();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add_zeros("theta", &[1]).unwrap();
        s.value_mut(id).data_mut()[0] = v;
        (s, id)
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (mut s, id) = scalar_store(0.0);
        s.get_mut(id).grad.data_mut()[0] = 1.0;
        let mut adam = AdamState::new(0.1);
        adam.step(&mut s, &[id]).unwrap();
        assert!((s.value(id).data()[0] + 0.1).abs() < 1e-6);
        assert_eq!(s.grad(id).data()[0], 0.0);
    }

    #[test]
    fn zero_grad_is_a_no_op() {
        let (mut s, id) = scalar_store(0.7);
        let mut adam = AdamState::new(0.1);
        for _ in 0..5 {
            adam.step(&mut s, &[id]).unwrap();
        }
        assert_eq!(s.value(id).data()[0], 0.7);
    }

    #[test]
    fn minimizes_square() {
        let (mut s, id) = scalar_store(1.0);
        let mut adam = AdamState::new(0.1);
        for _ in 0..100 {
            let th = s.value(id).data()[0];
            s.get_mut(id).grad.data_mut()[0] = 2.0 * th;
            adam.step(&mut s, &[id]).unwrap();
        }
        assert!(s.value(id).data()[0].abs() < 0.05, "{}", s.value(id).data()[0]);
    }

    #[test]
    fn non_finite_grad_names_param() {
        let (mut s, id) = scalar_store(0.0);
        s.get_mut(id).grad.data_mut()[0] = f64::NAN;
        let err = AdamState::new(0.1).step(&mut s, &[id]).unwrap_err();
        assert!(err.to_string().contains("theta"));
    }
}
