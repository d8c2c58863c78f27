//! AdamW with decoupled weight decay.

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

pub struct AdamW<T: Scalar> {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig, store: &ParamStore<T>) -> Self {
        let zeros = || store.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// `p <- p (1 - lr wd)`, then the bias-corrected Adam update.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::invalid(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.m.len()
            )));
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let decay = 1.0 - c.lr * c.weight_decay;
        for (i, g) in grads.iter().enumerate() {
            let p = store.param_by_index_mut(i);
            p.expect_same_shape(g, "adamw")?;
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                let g = gv.as_f64();
                let mn = c.beta1 * mv.as_f64() + (1.0 - c.beta1) * g;
                let vn = c.beta2 * vv.as_f64() + (1.0 - c.beta2) * g * g;
                *mv = T::of(mn);
                *vv = T::of(vn);
                let upd = c.lr * (mn / bc1) / ((vn / bc2).sqrt() + c.eps);
                *pv = T::of(pv.as_f64() * decay - upd);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::<f64>::new();
        store.add_param("w", Tensor::new([2], vec![1.0, -1.0]).unwrap());
        let mut opt = AdamW::new(AdamWConfig::default(), &store);
        let g = Tensor::new([2], vec![0.5, -2.0]).unwrap();
        opt.step(&mut store, &[g]).unwrap();
        let p = store.params()[0].value.data().to_vec();
        let decay = 1.0 - 3e-4 * 1e-2;
        assert!((p[0] - (decay - 3e-4)).abs() < 1e-10);
        assert!((p[1] - (-decay + 3e-4)).abs() < 1e-10);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::<f64>::new();
        store.add_param("w", Tensor::new([1], vec![3.0]).unwrap());
        let cfg = AdamWConfig {
            lr: 0.05,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &store);
        for _ in 0..2000 {
            let w = store.params()[0].value.data()[0];
            opt.step(&mut store, &[Tensor::new([1], vec![2.0 * (w - 1.0)]).unwrap()]).unwrap();
        }
        assert!((store.params()[0].value.data()[0] - 1.0).abs() < 1e-3);
    }
}
