//! Adam with bias correction. One optimizer instance owns the moment
//! buffers for one network's parameters; each parameter's update depends
//! only on its own gradient and moments, so update order is irrelevant.

use crate::error::{Error, Result};
use crate::tensor::Param;
use std::collections::HashMap;
use std::rc::Rc;

pub const DEFAULT_BETA1: f32 = 0.5;
pub const DEFAULT_BETA2: f32 = 0.999;
pub const DEFAULT_EPS: f32 = 1e-8;

pub struct Adam {
    lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    t: u64,
    params: Vec<Rc<Param>>,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    /// Defaults tuned for adversarial training (beta1 = 0.5).
    pub fn new(params: &[Rc<Param>], lr: f32) -> Result<Adam> {
        Adam::with_betas(params, lr, DEFAULT_BETA1, DEFAULT_BETA2, DEFAULT_EPS)
    }

    pub fn with_betas(
        params: &[Rc<Param>],
        lr: f32,
        beta1: f32,
        beta2: f32,
        eps: f32,
    ) -> Result<Adam> {
        if !(lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        Ok(Adam {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            params: params.to_vec(),
        })
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn lr(&self) -> f32 {
        self.lr
    }

    /// Apply one update from the gradients currently accumulated in the
    /// parameters. Gradients are left untouched; the caller zeroes them.
    pub fn step(&mut self) {
        self.t += 1;
        // corrections in f64: beta2^t stays accurate over long runs
        let c1 = (1.0 - (self.beta1 as f64).powi(self.t as i32)) as f32;
        let c2 = (1.0 - (self.beta2 as f64).powi(self.t as i32)) as f32;
        let (b1, b2) = (self.beta1, self.beta2);
        let (lr, eps) = (self.lr, self.eps);
        for (i, p) in self.params.iter().enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            p.update(|value, grad| {
                for j in 0..value.len() {
                    let g = grad[j];
                    m[j] = b1 * m[j] + (1.0 - b1) * g;
                    v[j] = b2 * v[j] + (1.0 - b2) * g * g;
                    let mh = m[j] / c1;
                    let vh = v[j] / c2;
                    value[j] -= lr * mh / (vh.sqrt() + eps);
                }
            });
        }
    }

    /// Moment buffers keyed by parameter name, for checkpointing.
    pub fn state(&self) -> impl Iterator<Item = (&str, &[f32], &[f32])> {
        self.params
            .iter()
            .zip(self.m.iter().zip(&self.v))
            .map(|(p, (m, v))| (p.name(), m.as_slice(), v.as_slice()))
    }

    /// Restore step counter and moments saved by `state`.
    pub fn restore(&mut self, t: u64, moments: &HashMap<String, (Vec<f32>, Vec<f32>)>) -> Result<()> {
        for (i, p) in self.params.iter().enumerate() {
            let (m, v) = moments.get(p.name()).ok_or_else(|| {
                Error::Checkpoint(format!("missing optimizer moments for {}", p.name()))
            })?;
            if m.len() != p.len() || v.len() != p.len() {
                return Err(Error::Checkpoint(format!(
                    "optimizer moment size mismatch for {}",
                    p.name()
                )));
            }
            self.m[i].copy_from_slice(m);
            self.v[i].copy_from_slice(v);
        }
        self.t = t;
        Ok(())
    }
}
