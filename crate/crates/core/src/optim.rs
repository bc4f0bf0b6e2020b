//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::params::{ParamKind, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: Vec<Option<(Tensor, Tensor)>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self::with_betas(lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable parameter. Every trainable
    /// parameter must carry a gradient.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if let Some(e) = store
            .entries()
            .iter()
            .find(|e| e.kind == ParamKind::Trainable && e.grad.is_none())
        {
            return Err(Error::MissingGrad(e.name.clone()));
        }
        self.moments.resize(store.len(), None);
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (entry, slot) in store.entries_mut().iter_mut().zip(&mut self.moments) {
            if entry.kind != ParamKind::Trainable {
                continue;
            }
            let grad = entry.grad.as_ref().expect("checked above");
            let (m, v) = slot.get_or_insert_with(|| {
                (
                    Tensor::zeros(entry.value.shape()),
                    Tensor::zeros(entry.value.shape()),
                )
            });
            for (((p, g), mi), vi) in entry
                .value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(value: f64, grad: f64) -> ParamStore {
        let mut s = ParamStore::new();
        let id = s.trainable("p", Tensor::full(&[3], value));
        s.accumulate_grad(id, &Tensor::full(&[3], grad));
        s
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = store_with(1.5, 0.0);
        let mut adam = Adam::new(0.01);
        adam.step(&mut s).unwrap();
        assert_eq!(s.entries()[0].value.data(), &[1.5; 3]);
    }

    #[test]
    fn first_step_matches_hand_formula() {
        let (lr, g) = (0.001, 0.3);
        let mut s = store_with(2.0, g);
        let mut adam = Adam::new(lr);
        adam.step(&mut s).unwrap();
        // m_hat = g, v_hat = g^2 after bias correction at t = 1.
        let expected = 2.0 - lr * g / (g.abs() + 1e-8);
        for v in s.entries()[0].value.data() {
            assert!((v - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_gradient_step_tends_to_lr() {
        let lr = 0.01;
        let mut s = store_with(0.0, -2.0);
        let mut adam = Adam::new(lr);
        let mut prev = 0.0;
        let mut last_step = 0.0;
        for _ in 0..2000 {
            adam.step(&mut s).unwrap();
            let now = s.entries()[0].value.data()[0];
            last_step = now - prev;
            prev = now;
        }
        assert!((last_step - lr).abs() < 1e-6, "step {last_step}");
    }

    #[test]
    fn missing_grad_is_an_error() {
        let mut s = ParamStore::new();
        s.trainable("w", Tensor::ones(&[2]));
        let mut adam = Adam::new(0.1);
        assert!(matches!(adam.step(&mut s), Err(Error::MissingGrad(_))));
    }
}
