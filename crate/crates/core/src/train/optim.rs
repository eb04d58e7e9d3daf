use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction; moments kept in f64.
#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<T: Scalar>(cfg: AdamConfig, params: &ParamStore<T>) -> Self {
        let zeros = || params.iter().map(|(_, t)| vec![0.0; t.len()]).collect::<Vec<_>>();
        Self {
            cfg,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update. `grads[i]` belongs to the i-th parameter in registry order.
    ///
    /// Any non-finite gradient aborts before a single parameter changes.
    pub fn update<T: Scalar>(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Contract(format!(
                "optimizer state for {} tensors, got {} gradients for {} parameters",
                self.m.len(),
                grads.len(),
                params.len()
            )));
        }
        for ((name, p), g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::shape("adam", p.shape(), g.shape()));
            }
            if let Some(i) = g.data().iter().position(|x| !x.is_finite()) {
                return Err(Error::Numerical {
                    name: name.to_string(),
                    detail: format!("gradient element {i} is {}", g.data()[i].as_f64()),
                });
            }
        }
        self.step += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (k, ((_, p), g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, (w, gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gi = gi.as_f64();
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let step = c.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.eps);
                *w = T::from_f64_lossy(w.as_f64() - step);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(vals: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("head.w", Tensor::new(&[vals.len()], vals.to_vec()).unwrap()).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = store(&[1.0, -2.0]);
        let mut opt = Adam::new(AdamConfig::default(), &s);
        opt.update(&mut s, &[Tensor::zeros(&[2])]).unwrap();
        assert_eq!(s.by_name("head.w").unwrap().data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        let mut s = store(&[0.0, 0.0]);
        let mut opt = Adam::new(AdamConfig::default(), &s);
        opt.update(&mut s, &[Tensor::new(&[2], vec![1e3, -5e2]).unwrap()]).unwrap();
        let d = s.by_name("head.w").unwrap().data();
        assert!((d[0] + 1e-3).abs() < 1e-9 && (d[1] - 1e-3).abs() < 1e-9);
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut s = store(&[0.0]);
        let mut opt = Adam::new(AdamConfig::default(), &s);
        let e = opt.update(&mut s, &[Tensor::full(&[1], f64::NAN)]).unwrap_err();
        assert!(matches!(&e, Error::Numerical { name, .. } if name == "head.w"));
        assert_eq!(opt.step, 0);
    }
}
