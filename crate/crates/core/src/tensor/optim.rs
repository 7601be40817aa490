use std::rc::Rc;

use super::array::Tensor;
use super::params::ParamStore;
use crate::error::{contract_err, Result};

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Adam {
    /// Creates moment buffers for every parameter of `store`.
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, first: zeros.clone(), second: zeros }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.first, &self.second)
    }

    /// Restores state saved in a checkpoint.
    pub fn restore(&mut self, step: u64, first: Vec<Tensor>, second: Vec<Tensor>) -> Result<()> {
        let same = |a: &[Tensor], b: &[Tensor]| {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.shape() == y.shape())
        };
        if !same(&first, &self.first) || !same(&second, &self.second) {
            return contract_err("optimizer state does not match the parameter set");
        }
        self.step = step;
        self.first = first;
        self.second = second;
        Ok(())
    }

    /// Applies one update to every parameter in `store`. Every parameter must
    /// carry a gradient; gradients are left in place for an explicit
    /// [`ParamStore::zero_grad`].
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if store.len() != self.first.len() {
            return contract_err("optimizer was built for a different parameter set");
        }
        if let Some(p) = store.iter().find(|p| p.grad.is_none()) {
            return contract_err(format!("parameter {} has no gradient", p.name));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, p) in store.params_mut().iter_mut().enumerate() {
            let grad = p.grad.as_ref().expect("checked above");
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            let value = Rc::make_mut(&mut p.value).data_mut();
            for (j, &g) in grad.data().iter().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                value[j] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(x: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("x", Tensor::scalar(x));
        s
    }

    fn set_grad(store: &mut ParamStore, g: f64) {
        let id = store.id("x").unwrap();
        store.param_mut(id).grad = Some(Tensor::scalar(g));
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = scalar_store(1.5);
        let mut opt = Adam::new(&s, 1e-4);
        set_grad(&mut s, 0.0);
        opt.step(&mut s).unwrap();
        assert_eq!(s.iter().next().unwrap().value.item().unwrap(), 1.5);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = scalar_store(0.0);
        let mut opt = Adam::new(&s, 1e-4);
        set_grad(&mut s, 1.0);
        opt.step(&mut s).unwrap();
        // m̂ = 1, v̂ = 1 → Δ = lr / (1 + ε)
        let x = s.iter().next().unwrap().value.item().unwrap();
        assert!((x + 1e-4 / (1.0 + 1e-8)).abs() < 1e-18);
    }

    #[test]
    fn descends_quadratic() {
        let mut s = scalar_store(1.0);
        let mut opt = Adam::new(&s, 0.1);
        for _ in 0..100 {
            let x = s.iter().next().unwrap().value.item().unwrap();
            set_grad(&mut s, 2.0 * x);
            opt.step(&mut s).unwrap();
            s.zero_grad();
        }
        assert!(s.iter().next().unwrap().value.item().unwrap().abs() < 0.1);
    }

    #[test]
    fn missing_grad_is_contract_error() {
        let mut s = scalar_store(1.0);
        let mut opt = Adam::new(&s, 0.1);
        assert!(opt.step(&mut s).is_err());
    }
}
