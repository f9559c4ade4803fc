//! SGD with classical momentum: v <- mu*v + (g + wd*p); p <- p - lr*v.
//! Gradients are consumed (cleared) by each step.

use super::Tensor;
use crate::error::{CoreError, Result};

pub struct Sgd {
    momentum: f64,
    weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Sgd {
        Sgd { momentum, weight_decay, velocity: Vec::new() }
    }

    pub fn step(&mut self, params: &[Tensor], lr: f64) -> Result<()> {
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(CoreError::invalid(format!(
                "optimizer built for {} parameters, got {}",
                self.velocity.len(),
                params.len()
            )));
        }
        for (p, v) in params.iter().zip(self.velocity.iter_mut()) {
            let g = p
                .grad()
                .ok_or_else(|| CoreError::Grad("sgd step before any gradient was accumulated".into()))?;
            if g.len() != v.len() {
                return Err(CoreError::shape("parameter changed size between steps"));
            }
            let mut d = p.data_mut();
            for i in 0..v.len() {
                v[i] = self.momentum * v[i] + g[i] + self.weight_decay * d[i];
                d[i] -= lr * v[i];
            }
            drop(d);
            p.clear_grad();
        }
        Ok(())
    }
}
