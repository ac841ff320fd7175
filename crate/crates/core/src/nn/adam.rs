use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::param::ParamStore;
use super::tensor::Tensor;
use crate::error::{msg, Error, Result};

/// Bias-corrected Adam.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Tensor> = store.entries().iter().map(|e| Tensor::zeros(e.value.rows(), e.value.cols())).collect();
        Self { step: 0, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, first: zeros.clone(), second: zeros }
    }

    /// First and second moment estimates, one tensor per parameter.
    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.first, &self.second)
    }

    /// Replaces the moment estimates, e.g. when resuming from a checkpoint.
    pub fn set_moments(&mut self, first: Vec<Tensor>, second: Vec<Tensor>) -> Result<()> {
        let same = |a: &[Tensor], b: &[Tensor]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.shape() == y.shape());
        if !same(&first, &self.first) || !same(&second, &self.second) {
            return Err(Error::Shape(msg!("moment tensors do not match the parameter layout")));
        }
        self.first = first;
        self.second = second;
        Ok(())
    }

    /// One update. A missing gradient counts as zero.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) -> Result<()> {
        if grads.len() != store.len() || self.first.len() != store.len() {
            return Err(Error::Shape(msg!(
                "{} gradients and {} moment slots for {} parameters",
                grads.len(),
                self.first.len(),
                store.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.shape() != self.first[i].shape() {
                    return Err(Error::Shape(msg!("gradient {:?} vs parameter {:?}", g.shape(), self.first[i].shape())));
                }
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let c1 = 1.0 - libm::pow(self.beta1, t);
        let c2 = 1.0 - libm::pow(self.beta2, t);
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            let p = store.get_mut(id).data_mut();
            for j in 0..p.len() {
                let gj = grads[i].as_ref().map_or(0.0, |g| g.data()[j]);
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                p[j] -= self.lr * mh / (libm::sqrt(vh) + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::from_vec(1, 3, vec![1.0, -2.0, 0.5]).unwrap());
        let mut adam = AdamState::new(&store, 0.01);
        let g = Tensor::from_vec(1, 3, vec![3.0, -0.2, 1e-3]).unwrap();
        adam.step(&mut store, &[Some(g.clone())]).unwrap();
        let before = [1.0, -2.0, 0.5];
        for j in 0..3 {
            let delta = before[j] - store.get(id).data()[j];
            assert!(delta.signum() == g.data()[j].signum());
            assert!(delta.abs() <= 0.01 && delta.abs() >= 0.99 * 0.01, "{delta}");
        }
    }

    #[test]
    fn zero_gradient_keeps_parameters() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::from_vec(2, 1, vec![0.3, -0.7]).unwrap());
        let mut adam = AdamState::new(&store, 0.1);
        for _ in 0..50 {
            adam.step(&mut store, &[Some(Tensor::zeros(2, 1))]).unwrap();
            adam.step(&mut store, &[None]).unwrap();
        }
        assert_eq!(store.get(id).data(), &[0.3, -0.7]);
    }

    #[test]
    fn converges_on_scalar_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(0.0));
        let mut adam = AdamState::new(&store, 0.1);
        let mut reached = None;
        for step in 0..500 {
            let w = store.get(id).item();
            adam.step(&mut store, &[Some(Tensor::scalar(2.0 * (w - 5.0)))]).unwrap();
            if (store.get(id).item() - 5.0).abs() < 0.01 && reached.is_none() {
                reached = Some(step);
            }
        }
        assert!((store.get(id).item() - 5.0).abs() < 0.01, "w = {}", store.get(id).item());
        assert!(reached.is_some());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::zeros(2, 2));
        let mut adam = AdamState::new(&store, 0.1);
        assert!(matches!(adam.step(&mut store, &[Some(Tensor::zeros(1, 2))]), Err(Error::Shape(_))));
        assert!(matches!(adam.step(&mut store, &[]), Err(Error::Shape(_))));
    }
}
