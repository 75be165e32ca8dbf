use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Adam with decoupled weight decay. Moments are kept per parameter in the
/// parameter's own shape.
#[derive(Clone, Debug)]
pub struct AdamW<T: Scalar = f32> {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: &ParamStore<T>, config: AdamWConfig) -> Result<Self> {
        let c = &config;
        let ok = c.lr >= 0.0
            && (0.0..1.0).contains(&c.beta1)
            && (0.0..1.0).contains(&c.beta2)
            && c.eps > 0.0
            && c.weight_decay >= 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid optimizer settings {config:?}")));
        }
        let zeros = || params.ids().map(|id| Tensor::zeros(params.get(id).shape())).collect();
        Ok(AdamW {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, index: usize) -> &Tensor<T> {
        &self.m[index]
    }

    pub fn second_moment(&self, index: usize) -> &Tensor<T> {
        &self.v[index]
    }

    /// One update. `grads[i]` is the gradient of parameter `i`; `None` counts
    /// as zero. Frozen parameters are left untouched.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Option<Tensor<T>>]) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::Argument(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.m.len()
            )));
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let ids: Vec<_> = params.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            if params.is_frozen(id) {
                continue;
            }
            let p = params.get_mut(id).data_mut();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            let g = grads[k].as_ref().map(|g| g.data());
            if let Some(g) = g {
                if g.len() != p.len() {
                    return Err(Error::Argument(format!(
                        "gradient {k} has {} elements, parameter {}",
                        g.len(),
                        p.len()
                    )));
                }
            }
            for i in 0..p.len() {
                let gi = g.map_or(0.0, |g| g[i].as_f64());
                let mi = c.beta1 * m[i].as_f64() + (1.0 - c.beta1) * gi;
                let vi = c.beta2 * v[i].as_f64() + (1.0 - c.beta2) * gi * gi;
                m[i] = T::of(mi);
                v[i] = T::of(vi);
                let mut pi = p[i].as_f64();
                pi -= c.lr * c.weight_decay * pi;
                pi -= c.lr * (mi / bc1) / ((vi / bc2).sqrt() + c.eps);
                p[i] = T::of(pi);
            }
        }
        Ok(())
    }
}
