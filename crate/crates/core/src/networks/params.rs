//! Named trainable parameters with seeded initialization.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};

/// Ordered collection of the trainable variables of one network.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn insert(&mut self, name: String, var: Var) {
        assert!(
            self.vars.insert(name.clone(), var).is_none(),
            "duplicate parameter `{name}`"
        );
    }

    /// He-uniform weights scaled by `gain`, zero bias.
    pub fn conv2d<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        gain: f64,
        rng: &mut R,
        device: &Device,
    ) -> Result<Conv2d> {
        let fan_in = in_c * kernel * kernel;
        let bound = gain * (6.0 / (1.04 * fan_in as f64)).sqrt();
        let weight = uniform_var(rng, bound, (out_c, in_c, kernel, kernel), device)?;
        let bias = Var::from_tensor(&Tensor::zeros(out_c, DType::F32, device)?)?;
        self.insert(format!("{name}.weight"), weight.clone());
        self.insert(format!("{name}.bias"), bias.clone());
        Ok(Conv2d {
            weight: weight.as_tensor().clone(),
            bias: bias.as_tensor().clone(),
        })
    }

    pub fn linear<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
        device: &Device,
    ) -> Result<Linear> {
        let bound = (6.0 / in_dim as f64).sqrt();
        let weight = uniform_var(rng, bound, (out_dim, in_dim), device)?;
        let bias = Var::from_tensor(&Tensor::zeros(out_dim, DType::F32, device)?)?;
        self.insert(format!("{name}.weight"), weight.clone());
        self.insert(format!("{name}.bias"), bias.clone());
        Ok(Linear {
            weight: weight.as_tensor().clone(),
            bias: bias.as_tensor().clone(),
        })
    }

    pub fn vars(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Total scalar parameter count.
    pub fn parameter_count(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrites every variable from `tensors`; names and shapes must match.
    pub fn load(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.vars {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for `{name}`: {:?} vs {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(var.dtype())?)?;
        }
        Ok(())
    }

    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?)))
            .collect()
    }
}

fn uniform_var<R: Rng + ?Sized>(
    rng: &mut R,
    bound: f64,
    shape: impl Into<candle_core::Shape>,
    device: &Device,
) -> Result<Var> {
    let shape = shape.into();
    let dist = Uniform::new_inclusive(-bound as f32, bound as f32).expect("finite bound");
    let data: Vec<f32> = (0..shape.elem_count()).map(|_| dist.sample(rng)).collect();
    Ok(Var::from_tensor(&Tensor::from_vec(data, shape, device)?)?)
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
}

impl Conv2d {
    pub fn forward(&self, x: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
        let w = self.weight.to_dtype(x.dtype())?;
        let b = self.bias.to_dtype(x.dtype())?.reshape((1, (), 1, 1))?;
        Ok(x.conv2d(&w, padding, stride, 1, 1)?.broadcast_add(&b)?)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    /// `x`: `N × in`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let w = self.weight.to_dtype(x.dtype())?;
        let b = self.bias.to_dtype(x.dtype())?;
        Ok(x.matmul(&w.t()?)?.broadcast_add(&b)?)
    }
}

pub(crate) fn leaky_relu(x: &Tensor) -> Result<Tensor> {
    Ok(x.maximum(&(x * 0.2)?)?)
}
