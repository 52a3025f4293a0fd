use super::{Gradients, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

/// Adam optimiser state with bias correction.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub first: Vec<Tensor<T>>,
    pub second: Vec<Tensor<T>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr: f64,
    pub base_lr: f64,
}

impl<T: Real> AdamState<T> {
    pub fn new(store: &ParamStore<T>, lr: f64) -> Self {
        let zeros = || store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            first: zeros(),
            second: zeros(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr,
            base_lr: lr,
        }
    }

    /// One bias-corrected update. Rejects non-finite gradients without
    /// touching parameters or moments.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) -> Result<()> {
        if self.first.len() != store.len() {
            return Err(Error::Shape(format!(
                "optimiser tracks {} tensors, store has {}",
                self.first.len(),
                store.len()
            )));
        }
        if let Some(name) = grads.first_non_finite(store) {
            return Err(Error::Numeric(format!(
                "gradient of {name} is not finite at step {}",
                self.step + 1
            )));
        }
        self.step += 1;
        let b1 = T::lit(self.beta1);
        let b2 = T::lit(self.beta2);
        let one = T::one();
        let c1 = T::lit(1.0 - self.beta1.powi(self.step as i32));
        let c2 = T::lit(1.0 - self.beta2.powi(self.step as i32));
        let lr = T::lit(self.lr);
        let eps = T::lit(self.eps);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let m = self.first[id.index()].data_mut();
            let v = self.second[id.index()].data_mut();
            match grads.get(id) {
                Some(g) => {
                    if g.len() != m.len() {
                        return Err(Error::Shape(format!(
                            "gradient for {} has {} elements, expected {}",
                            store.name(id),
                            g.len(),
                            m.len()
                        )));
                    }
                    let p = store.get_mut(id).data_mut();
                    for i in 0..p.len() {
                        let gi = g.data()[i];
                        m[i] = b1 * m[i] + (one - b1) * gi;
                        v[i] = b2 * v[i] + (one - b2) * gi * gi;
                        let mh = m[i] / c1;
                        let vh = v[i] / c2;
                        p[i] = p[i] - lr * mh / (vh.sqrt() + eps);
                    }
                }
                // parameters outside this step's graph are left untouched
                None => {}
            }
        }
        Ok(())
    }
}

/// Step-wise halving: `lr = lr₀ · 0.5^⌊step / period⌋`.
pub fn halve_lr_schedule<T: Real>(state: &mut AdamState<T>, step: u64, period: u64) -> Result<()> {
    if period == 0 {
        return Err(Error::Argument("learning-rate period must be positive".into()));
    }
    state.lr = state.base_lr * 0.5f64.powi((step / period) as i32);
    Ok(())
}
