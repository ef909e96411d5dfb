//! The trainable networks: DeShadower, Illumination generator, Illumination
//! critic and Refinement network, plus projection heads and the frozen
//! perceptual extractor.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{embed_region, extract_region, ImageTensor, RegionTensor, ShadowMask};

pub mod checkpoint;
pub mod critic;
pub mod generator;
pub mod params;
pub mod perceptual;
pub mod projection;

pub use critic::{Critic, CriticSpec};
pub use generator::{Generator, GeneratorSpec};
pub use params::ParamStore;
pub use perceptual::PerceptualExtractor;
pub use projection::{Locations, ProjectionHead};

/// Encoder activations keyed by tap id (1 = first downsampling stage).
#[derive(Clone, Debug, Default)]
pub struct FeatureStack(BTreeMap<usize, Tensor>);

impl FeatureStack {
    pub fn insert(&mut self, layer: usize, t: Tensor) {
        self.0.insert(layer, t);
    }

    pub fn get(&self, layer: usize) -> Option<&Tensor> {
        self.0.get(&layer)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Tensor)> {
        self.0.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Unit-norm embeddings per layer, each `N_l × dim`.
#[derive(Clone, Debug, Default)]
pub struct LayerEmbeddings(pub BTreeMap<usize, Tensor>);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub deshadower: GeneratorSpec,
    pub illumination: GeneratorSpec,
    pub refiner: GeneratorSpec,
    pub critic: CriticSpec,
    pub projection_hidden: usize,
    pub projection_dim: usize,
    /// Patch locations sampled per layer for the contrastive losses.
    pub nce_locations: usize,
    /// Channel multiplier of the random-weight extractor (ignored for
    /// pretrained weights).
    pub perceptual_width: f64,
    /// Use seeded random extractor weights instead of pretrained ones.
    pub perceptual_random: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            deshadower: GeneratorSpec::default(),
            illumination: GeneratorSpec::default(),
            refiner: GeneratorSpec::default(),
            critic: CriticSpec::default(),
            projection_hidden: 256,
            projection_dim: 256,
            nce_locations: 256,
            perceptual_width: 1.0,
            perceptual_random: false,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        self.deshadower.validate("networks.deshadower")?;
        self.illumination.validate("networks.illumination")?;
        self.refiner.validate("networks.refiner")?;
        self.critic.validate()?;
        if self.projection_dim == 0 || self.projection_hidden == 0 {
            return Err(Error::config("networks.projection_dim", "must be positive"));
        }
        if self.nce_locations == 0 {
            return Err(Error::config("networks.nce_locations", "must be positive"));
        }
        if !(self.perceptual_width > 0.0) {
            return Err(Error::config("networks.perceptual_width", "must be positive"));
        }
        Ok(())
    }
}

fn tap_channels(spec: &GeneratorSpec) -> BTreeMap<usize, usize> {
    (1..=spec.depth).map(|l| (l, spec.channels(l))).collect()
}

/// Intermediate products of one inference pass.
#[derive(Clone, Debug)]
pub struct Stages {
    pub shadow_region: RegionTensor,
    pub removed_region: RegionTensor,
    pub embedded: ImageTensor,
    pub output: ImageTensor,
}

/// All trainable networks of one run. The Illumination pair is absent in
/// supervised mode.
#[derive(Clone, Debug)]
pub struct Networks {
    pub config: NetworkConfig,
    pub deshadower: Generator,
    pub deshadower_head: ProjectionHead,
    pub illumination: Option<Generator>,
    pub critic: Option<Critic>,
    pub refiner: Generator,
    pub refiner_head: ProjectionHead,
    device: Device,
}

impl Networks {
    pub fn new(config: &NetworkConfig, with_illumination: bool, seed: u64, device: &Device) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let deshadower = Generator::new(&config.deshadower, &mut rng, device)?;
        let deshadower_head = ProjectionHead::new(
            &tap_channels(&config.deshadower),
            config.projection_hidden,
            config.projection_dim,
            &mut rng,
            device,
        )?;
        let (illumination, critic) = if with_illumination {
            (
                Some(Generator::new(&config.illumination, &mut rng, device)?),
                Some(Critic::new(&config.critic, &mut rng, device)?),
            )
        } else {
            (None, None)
        };
        let refiner = Generator::new(&config.refiner, &mut rng, device)?;
        let refiner_head = ProjectionHead::new(
            &tap_channels(&config.refiner),
            config.projection_hidden,
            config.projection_dim,
            &mut rng,
            device,
        )?;
        Ok(Self {
            config: config.clone(),
            deshadower,
            deshadower_head,
            illumination,
            critic,
            refiner,
            refiner_head,
            device: device.clone(),
        })
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Parameter groups by stable name, in checkpoint order.
    pub fn groups(&self) -> Vec<(&'static str, &ParamStore)> {
        let mut g = vec![
            ("deshadower", self.deshadower.params()),
            ("deshadower_head", self.deshadower_head.params()),
        ];
        if let Some(i) = &self.illumination {
            g.push(("illumination", i.params()));
        }
        if let Some(c) = &self.critic {
            g.push(("critic", c.params()));
        }
        g.push(("refiner", self.refiner.params()));
        g.push(("refiner_head", self.refiner_head.params()));
        g
    }

    pub fn group(&self, name: &str) -> Option<&ParamStore> {
        self.groups().into_iter().find(|(n, _)| *n == name).map(|(_, p)| p)
    }

    pub fn parameter_count(&self) -> usize {
        self.groups().iter().map(|(_, p)| p.parameter_count()).sum()
    }

    fn illumination_net(&self) -> Result<&Generator> {
        self.illumination
            .as_ref()
            .ok_or_else(|| Error::contract("illumination network is not part of a supervised run"))
    }

    fn critic_net(&self) -> Result<&Critic> {
        self.critic
            .as_ref()
            .ok_or_else(|| Error::contract("illumination critic is not part of a supervised run"))
    }

    /// DeShadower on tensors: output is re-masked to the input's support.
    pub fn deshadow_tensor(&self, region: &Tensor, mask: &Tensor) -> Result<(Tensor, FeatureStack)> {
        let (out, feats) = self.deshadower.forward(region)?;
        Ok((out.broadcast_mul(mask)?, feats))
    }

    pub fn illuminate_tensor(&self, region: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let (out, _) = self.illumination_net()?.forward(region)?;
        Ok(out.broadcast_mul(mask)?)
    }

    pub fn critic_tensor(&self, x: &Tensor) -> Result<Tensor> {
        self.critic_net()?.score(x)
    }

    pub fn deshadower_forward(&self, region: &RegionTensor) -> Result<(RegionTensor, FeatureStack)> {
        let x = region.to_tensor(DType::F32, &self.device)?;
        let m = region.mask().to_tensor(DType::F32, &self.device)?;
        let (out, feats) = self.deshadow_tensor(&x, &m)?;
        Ok((RegionTensor::from_tensor(&out, region.mask().clone())?, feats))
    }

    pub fn illumination_generate(&self, region: &RegionTensor) -> Result<RegionTensor> {
        let x = region.to_tensor(DType::F32, &self.device)?;
        let m = region.mask().to_tensor(DType::F32, &self.device)?;
        RegionTensor::from_tensor(&self.illuminate_tensor(&x, &m)?, region.mask().clone())
    }

    /// Patch score map (`h×w`) for a region.
    pub fn critic_score(&self, region: &RegionTensor) -> Result<Tensor> {
        let x = region.to_tensor(DType::F32, &self.device)?;
        Ok(self.critic_tensor(&x)?.squeeze(0)?.squeeze(0)?)
    }

    pub fn refine_forward(&self, embedded: &ImageTensor) -> Result<(ImageTensor, FeatureStack)> {
        let x = embedded.to_tensor(DType::F32, &self.device)?;
        let (out, feats) = self.refiner.forward(&x)?;
        Ok((ImageTensor::from_tensor(&out)?, feats))
    }

    /// Extract → DeShadower → embed → (optionally) refine.
    pub fn remove_shadow(&self, image: &ImageTensor, mask: &ShadowMask, bypass_refine: bool) -> Result<Stages> {
        let shadow_region = extract_region(image, mask)?;
        let (removed_region, _) = self.deshadower_forward(&shadow_region)?;
        let embedded = embed_region(image, mask, &removed_region)?;
        let output = if bypass_refine {
            embedded.clone()
        } else {
            self.refine_forward(&embedded)?.0
        };
        Ok(Stages {
            shadow_region,
            removed_region,
            embedded,
            output,
        })
    }
}
