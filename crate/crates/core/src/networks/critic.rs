//! Patch discriminator producing an unbounded per-patch score map.

use candle_core::{Device, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{leaky_relu, Conv2d, ParamStore};
use crate::error::{Error, Result};

const KERNEL: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CriticSpec {
    /// Activated convolution layers before the 1-channel output convolution;
    /// all but the last of them have stride 2.
    pub num_layers: usize,
    pub base_channels: usize,
}

impl Default for CriticSpec {
    fn default() -> Self {
        Self {
            num_layers: 4,
            base_channels: 64,
        }
    }
}

impl CriticSpec {
    fn strides(&self) -> Vec<usize> {
        let mut s = vec![2; self.num_layers - 1];
        s.extend([1, 1]);
        s
    }

    /// Side of the input window seen by one output score.
    pub fn receptive_patch(&self) -> usize {
        self.strides()
            .iter()
            .rev()
            .fold(1, |rf, stride| (rf - 1) * stride + KERNEL)
    }

    /// Score-map side for an input side of `n` (padding 1 everywhere).
    pub fn output_side(&self, n: usize) -> usize {
        self.strides()
            .iter()
            .fold(n, |len, stride| (len + 2 - KERNEL) / stride + 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers < 2 {
            return Err(Error::config("networks.critic.num_layers", "need at least 2 layers"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Critic {
    spec: CriticSpec,
    layers: Vec<(Conv2d, usize)>,
    params: ParamStore,
}

impl Critic {
    pub fn new<R: Rng + ?Sized>(spec: &CriticSpec, rng: &mut R, device: &Device) -> Result<Self> {
        spec.validate()?;
        let mut store = ParamStore::new();
        let mut layers = Vec::new();
        let mut cin = 3;
        let strides = spec.strides();
        for (i, stride) in strides.iter().enumerate() {
            let last = i + 1 == strides.len();
            let cout = if last {
                1
            } else {
                spec.base_channels * (1 << i.min(3))
            };
            let conv = store.conv2d(&format!("conv{i}"), cin, cout, KERNEL, 1.0, rng, device)?;
            layers.push((conv, *stride));
            cin = cout;
        }
        Ok(Self {
            spec: spec.clone(),
            layers,
            params: store,
        })
    }

    pub fn spec(&self) -> &CriticSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// `N×3×H×W` → `N×1×h×w` patch scores.
    pub fn score(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        let patch = self.spec.receptive_patch();
        if h < patch || w < patch {
            return Err(Error::shape(format!(
                "critic input {h}x{w} is smaller than its {patch}px receptive patch"
            )));
        }
        let mut y = x.clone();
        let n = self.layers.len();
        for (i, (conv, stride)) in self.layers.iter().enumerate() {
            y = conv.forward(&y, *stride, 1)?;
            if i + 1 < n {
                y = leaky_relu(&y)?;
            }
        }
        Ok(y)
    }
}
