//! SGD with momentum over named parameter groups.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::networks::ParamStore;

/// `v ← μ·v + g`, `θ ← θ − lr·v`, buffers keyed `"{group}.{param}"`.
#[derive(Clone, Debug)]
pub struct Sgd {
    momentum: f64,
    buffers: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::config("train.momentum", "must lie in [0, 1)"));
        }
        Ok(Self {
            momentum,
            buffers: BTreeMap::new(),
        })
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    /// Applies one update to every variable of `params` that has a gradient
    /// in `grads`. Variables without a gradient are left untouched.
    pub fn step(&mut self, group: &str, params: &ParamStore, grads: &GradStore, lr: f64) -> Result<()> {
        for (name, var) in params.vars() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = g.detach().to_dtype(var.dtype())?;
            let key = format!("{group}.{name}");
            let v = match self.buffers.get(&key) {
                Some(prev) => ((prev * self.momentum)? + &g)?.detach(),
                None => g,
            };
            var.set(&(var.as_tensor() - (&v * lr)?)?)?;
            self.buffers.insert(key, v);
        }
        Ok(())
    }

    pub fn buffers(&self) -> &BTreeMap<String, Tensor> {
        &self.buffers
    }

    pub fn load_buffers(&mut self, buffers: BTreeMap<String, Tensor>) {
        self.buffers = buffers;
    }
}
