//! Adam.

use crate::numerics::Tensor;
use crate::weights::Weights;
use crate::Result;

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Weights,
    v: Weights,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: Weights::new(), v: Weights::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every weight named in `grads`.
    pub fn update(&mut self, weights: &mut Weights, grads: &Weights) -> Result<()> {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, g) in grads.iter() {
            let w = weights.get_mut(name)?;
            if !self.m.contains(name) {
                self.m.insert(name.clone(), Tensor::zeros(g.shape().to_vec()));
                self.v.insert(name.clone(), Tensor::zeros(g.shape().to_vec()));
            }
            let m = self.m.get_mut(name)?.data_mut();
            let v = self.v.get_mut(name)?.data_mut();
            for (((w, &g), m), v) in w.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g as f64;
                let mn = self.beta1 * *m as f64 + (1.0 - self.beta1) * g;
                let vn = self.beta2 * *v as f64 + (1.0 - self.beta2) * g * g;
                *m = mn as f32;
                *v = vn as f32;
                let delta = self.lr * (mn / c1) / ((vn / c2).sqrt() + self.eps);
                *w = (*w as f64 - delta) as f32;
            }
        }
        Ok(())
    }
}
