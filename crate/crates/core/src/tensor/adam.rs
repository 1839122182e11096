use super::{Real, Tensor};
use crate::error::{shape_err, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Moment buffers for one group of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
    step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, first: Vec::new(), second: Vec::new(), step: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One Adam update. Parameters flagged in `decay` first shrink by
    /// `lr · weight_decay` (decoupled decay); the rest are only moved by Adam.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor<T>],
        grads: &[&Tensor<T>],
        decay: &[bool],
        lr: T,
        weight_decay: T,
    ) -> Result<()> {
        if params.len() != grads.len() || params.len() != decay.len() {
            return shape_err(format!(
                "adam: {} params, {} grads, {} decay flags",
                params.len(),
                grads.len(),
                decay.len()
            ));
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != params.len() {
            return shape_err("adam: parameter list changed between steps");
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || self.first[i].len() != p.numel() {
                return shape_err(format!("adam: parameter {i} does not match its gradient or moments"));
            }
        }
        self.step += 1;
        let (b1, b2) = (T::lit(self.config.beta1), T::lit(self.config.beta2));
        let eps = T::lit(self.config.eps);
        let t = self.step as i32;
        let c1 = T::one() - b1.powi(t);
        let c2 = T::one() - b2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let shrink = if decay[i] { T::one() - lr * weight_decay } else { T::one() };
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = b1 * m[j] + (T::one() - b1) * gj;
                v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                *w = *w * shrink - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
