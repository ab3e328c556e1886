//! Stochastic gradient descent with momentum and L2 weight decay.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::params::ParamStore;
use crate::{Error, Result, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig { lr: 0.01, momentum: 0.9, weight_decay: 3e-5 }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lr", self.lr), ("momentum", self.momentum), ("weight_decay", self.weight_decay)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(name, format!("must be finite and nonnegative, got {v}")));
            }
        }
        if self.momentum >= 1.0 {
            return Err(Error::config("momentum", "must be below 1"));
        }
        Ok(())
    }
}

/// Per-parameter momentum buffers.
///
/// Update per tensor, skipping tensors without a gradient:
/// `d = g + wd·w; buf = μ·buf + d; w -= lr·buf`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub config: SgdConfig,
    buffers: Vec<Tensor>,
}

impl Sgd {
    pub fn new(config: SgdConfig, params: &ParamStore) -> Self {
        let buffers = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Sgd { config, buffers }
    }

    pub fn buffers(&self) -> &[Tensor] {
        &self.buffers
    }

    pub fn set_buffers(&mut self, buffers: Vec<Tensor>) -> Result<()> {
        if buffers.len() != self.buffers.len() || buffers.iter().zip(&self.buffers).any(|(a, b)| a.shape() != b.shape()) {
            return Err(Error::Shape(format!(
                "momentum state has {} tensors, optimizer expects {}",
                buffers.len(),
                self.buffers.len()
            )));
        }
        self.buffers = buffers;
        Ok(())
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<&Tensor>]) -> Result<()> {
        if grads.len() != params.len() || self.buffers.len() != params.len() {
            return Err(Error::Shape(format!(
                "{} gradients for {} parameters ({} buffers)",
                grads.len(),
                params.len(),
                self.buffers.len()
            )));
        }
        let SgdConfig { lr, momentum, weight_decay } = self.config;
        for ((w, buf), g) in params.tensors_mut().iter_mut().zip(&mut self.buffers).zip(grads) {
            let Some(g) = g else { continue };
            if g.shape() != w.shape() {
                return Err(Error::Shape(format!("gradient {:?} for weight {:?}", g.shape(), w.shape())));
            }
            for ((wv, bv), gv) in w.data_mut().iter_mut().zip(buf.data_mut()).zip(g.data()) {
                let d = gv + weight_decay * *wv;
                *bv = momentum * *bv + d;
                *wv -= lr * *bv;
            }
        }
        Ok(())
    }
}
