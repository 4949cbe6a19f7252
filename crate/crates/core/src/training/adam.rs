use candle_core::backprop::GradStore;
use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::{self, ParamStore};

/// Adam with bias correction. Moment buffers follow the store's parameter order.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Result<Self> {
        let zeros = store
            .iter()
            .map(|(_, var)| Ok(var.as_tensor().zeros_like()?))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        })
    }

    /// Global L2 norm of the gradients present in `grads`.
    pub fn grad_norm(store: &ParamStore, grads: &GradStore) -> Result<f64> {
        let mut sq = 0.0;
        for (_, var) in store.iter() {
            if let Some(g) = grads.get(var.as_tensor()) {
                sq += nn::scalar(&g.sqr()?.sum_all()?)?;
            }
        }
        Ok(sq.sqrt())
    }

    /// One update. Parameters without a gradient keep their value and moments.
    pub fn step(&mut self, store: &ParamStore, grads: &GradStore, lr: f64, clip: Option<f64>) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "optimizer holds {} moment buffers for {} parameters",
                self.m.len(),
                store.len()
            )));
        }
        let scale = match clip {
            Some(max) => {
                let norm = Self::grad_norm(store, grads)?;
                if norm > max { max / norm } else { 1.0 }
            }
            None => 1.0,
        };
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, (_, var)) in store.iter().enumerate() {
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            let g = if scale != 1.0 { g.affine(scale, 0.0)? } else { g.clone() };
            let m = (self.m[i].affine(self.beta1, 0.0)? + g.affine(1.0 - self.beta1, 0.0)?)?;
            let v = (self.v[i].affine(self.beta2, 0.0)? + g.sqr()?.affine(1.0 - self.beta2, 0.0)?)?;
            let denom = v.affine(1.0 / bc2, 0.0)?.sqrt()?.affine(1.0, self.eps)?;
            let update = (m.affine(lr / bc1, 0.0)? / denom)?;
            var.set(&(var.as_tensor() - update)?)?;
            self.m[i] = m;
            self.v[i] = v;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut store = ParamStore::new(DType::F64);
        let w = Var::from_tensor(&Tensor::new(&[1.0f64, -2.0], &Device::Cpu).unwrap()).unwrap();
        store.insert("w", w.clone()).unwrap();
        let loss = w.as_tensor().sqr().unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let mut adam = Adam::new(&store, 0.9, 0.999, 1e-8).unwrap();
        adam.step(&store, &grads, 0.1, None).unwrap();
        let got = w.as_tensor().to_vec1::<f64>().unwrap();
        assert!((got[0] - 0.9).abs() < 1e-6);
        assert!((got[1] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new(DType::F64);
        let w = Var::from_tensor(&Tensor::new(&[3.0f64, -4.0], &Device::Cpu).unwrap()).unwrap();
        store.insert("w", w.clone()).unwrap();
        let mut adam = Adam::new(&store, 0.9, 0.999, 1e-8).unwrap();
        for _ in 0..500 {
            let loss = w.as_tensor().sqr().unwrap().sum_all().unwrap();
            let grads = loss.backward().unwrap();
            adam.step(&store, &grads, 0.05, Some(1.0)).unwrap();
        }
        let got = w.as_tensor().to_vec1::<f64>().unwrap();
        assert!(got.iter().all(|v| v.abs() < 1e-2), "{got:?}");
    }
}
