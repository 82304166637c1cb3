//! AdamW with linear warm-up followed by linear decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::module::Module;
use crate::scalar::Scalar;
use crate::ten::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    pub steps: usize,
    pub batch_size: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_ratio: 0.1,
            steps: 1000,
            batch_size: 8,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config(format!("warm-up ratio {} outside [0, 1]", self.warmup_ratio)));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be finite and non-negative", self.lr)));
        }
        Ok(())
    }

    /// Learning rate for 0-based `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let total = self.steps.max(1) as f64;
        let warm = (self.warmup_ratio * total).round();
        let s = step as f64 + 1.0;
        if s <= warm {
            self.lr * s / warm
        } else {
            self.lr * ((total - s) / (total - warm).max(1.0)).max(0.0)
        }
    }
}

/// Moment buffers for one module, indexed like `Module::params`.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    cfg: OptimConfig,
    m: Vec<Matrix<T>>,
    v: Vec<Matrix<T>>,
    t: usize,
}

impl<T: Scalar> AdamW<T> {
    pub fn new<M: Module<T> + ?Sized>(cfg: OptimConfig, module: &M) -> Self {
        let zeros: Vec<Matrix<T>> = module
            .params()
            .iter()
            .map(|(_, p)| Matrix::zeros(p.value.rows(), p.value.cols()))
            .collect();
        Self {
            cfg,
            v: zeros.clone(),
            m: zeros,
            t: 0,
        }
    }

    /// One update of every trainable parameter holding a gradient, then clears gradients.
    /// Weight decay skips single-row arrays (biases, gains, temperature).
    pub fn step<M: Module<T> + ?Sized>(&mut self, module: &mut M, lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (i, (_, p)) in module.params_mut().into_iter().enumerate() {
            let Some(g) = p.grad.take() else { continue };
            if !p.requires_grad {
                continue;
            }
            let decay = if p.value.rows() > 1 { self.cfg.weight_decay } else { 0.0 };
            let (m, v) = (self.m[i].as_mut_slice(), self.v[i].as_mut_slice());
            for (((x, &gi), mi), vi) in p.value.as_mut_slice().iter_mut().zip(g.as_slice()).zip(m).zip(v) {
                let gf = gi.as_f64();
                let mf = b1 * mi.as_f64() + (1.0 - b1) * gf;
                let vf = b2 * vi.as_f64() + (1.0 - b2) * gf * gf;
                *mi = T::lit(mf);
                *vi = T::lit(vf);
                let xf = x.as_f64();
                let upd = (mf / c1) / ((vf / c2).sqrt() + self.cfg.eps) + decay * xf;
                *x = T::lit(xf - lr * upd);
            }
        }
    }
}
