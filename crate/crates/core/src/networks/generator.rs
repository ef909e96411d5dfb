//! Dense U-Net style encoder/decoder used for the DeShadower, the Illumination
//! generator and the Refinement network.

use candle_core::{CpuStorage, CustomOp1, Device, Layout, Shape, Tensor, D};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{leaky_relu, Conv2d, ParamStore};
use super::FeatureStack;
use crate::error::{Error, Result};

/// Clips to `[0, 1]` in the forward pass and passes the gradient through
/// unchanged, so saturated pixels are not cut off from training.
struct PassClip;

impl CustomOp1 for PassClip {
    fn name(&self) -> &'static str {
        "pass-clip"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (start, end) = layout
            .contiguous_offsets()
            .ok_or_else(|| candle_core::Error::Msg("pass-clip expects a contiguous input".into()))?;
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(v[start..end].iter().map(|x| x.clamp(0.0, 1.0)).collect()),
            CpuStorage::F64(v) => CpuStorage::F64(v[start..end].iter().map(|x| x.clamp(0.0, 1.0)).collect()),
            _ => candle_core::bail!("pass-clip supports f32 and f64 only"),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad_res.clone()))
    }
}

pub(crate) fn pass_clip(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(PassClip)?)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSpec {
    pub base_channels: usize,
    /// Number of stride-2 encoder stages.
    pub depth: usize,
    pub dense_blocks_per_stage: usize,
    /// Convolutions inside one dense block.
    pub dense_layers: usize,
    pub skip_connections: bool,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            base_channels: 64,
            depth: 4,
            dense_blocks_per_stage: 2,
            dense_layers: 3,
            skip_connections: true,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self, key: &str) -> Result<()> {
        if self.depth < 3 {
            return Err(Error::config(format!("{key}.depth"), "encoder depth must be at least 3"));
        }
        if self.base_channels < 2 {
            return Err(Error::config(format!("{key}.base_channels"), "need at least 2 channels"));
        }
        if !self.skip_connections {
            return Err(Error::config(format!("{key}.skip_connections"), "skip connections are mandatory"));
        }
        if self.dense_layers == 0 {
            return Err(Error::config(format!("{key}.dense_layers"), "need at least one dense layer"));
        }
        Ok(())
    }

    /// Channels at encoder level `i` (0 = stem).
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels * (1 << level.min(3))
    }
}

#[derive(Clone, Debug)]
struct DenseBlock {
    layers: Vec<Conv2d>,
    transition: Conv2d,
}

impl DenseBlock {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        layers: usize,
        rng: &mut R,
        device: &Device,
    ) -> Result<Self> {
        let growth = (channels / 2).max(1);
        let mut convs = Vec::with_capacity(layers);
        for l in 0..layers {
            convs.push(store.conv2d(
                &format!("{name}.dense{l}"),
                channels + l * growth,
                growth,
                3,
                1.0,
                rng,
                device,
            )?);
        }
        let transition = store.conv2d(
            &format!("{name}.transition"),
            channels + layers * growth,
            channels,
            1,
            1.0,
            rng,
            device,
        )?;
        Ok(Self {
            layers: convs,
            transition,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut acc = x.clone();
        for conv in &self.layers {
            let y = leaky_relu(&conv.forward(&acc, 1, 1)?)?;
            acc = Tensor::cat(&[&acc, &y], 1)?;
        }
        // Residual around the block keeps the identity path short.
        Ok((leaky_relu(&self.transition.forward(&acc, 1, 0)?)? + x)?)
    }
}

#[derive(Clone, Debug)]
struct EncoderStage {
    down: Conv2d,
    blocks: Vec<DenseBlock>,
}

#[derive(Clone, Debug)]
struct DecoderStage {
    up: Conv2d,
    fuse: Conv2d,
    blocks: Vec<DenseBlock>,
}

/// Residual image generator: `out = clamp(x + f(x), 0, 1)`.
#[derive(Clone, Debug)]
pub struct Generator {
    spec: GeneratorSpec,
    stem: Conv2d,
    encoder: Vec<EncoderStage>,
    decoder: Vec<DecoderStage>,
    head: Conv2d,
    params: ParamStore,
}

impl Generator {
    pub fn new<R: Rng + ?Sized>(spec: &GeneratorSpec, rng: &mut R, device: &Device) -> Result<Self> {
        spec.validate("generator")?;
        let mut store = ParamStore::new();
        let stem = store.conv2d("stem", 3, spec.channels(0), 3, 1.0, rng, device)?;
        let mut encoder = Vec::with_capacity(spec.depth);
        for level in 1..=spec.depth {
            let (cin, cout) = (spec.channels(level - 1), spec.channels(level));
            let down = store.conv2d(&format!("enc{level}.down"), cin, cout, 3, 1.0, rng, device)?;
            let blocks = (0..spec.dense_blocks_per_stage)
                .map(|b| DenseBlock::new(&mut store, &format!("enc{level}.block{b}"), cout, spec.dense_layers, rng, device))
                .collect::<Result<_>>()?;
            encoder.push(EncoderStage { down, blocks });
        }
        let mut decoder = Vec::with_capacity(spec.depth);
        for level in (1..=spec.depth).rev() {
            let (cin, cout) = (spec.channels(level), spec.channels(level - 1));
            let up = store.conv2d(&format!("dec{level}.up"), cin, cout, 3, 1.0, rng, device)?;
            let fuse = store.conv2d(&format!("dec{level}.fuse"), 2 * cout, cout, 1, 1.0, rng, device)?;
            let blocks = (0..spec.dense_blocks_per_stage)
                .map(|b| DenseBlock::new(&mut store, &format!("dec{level}.block{b}"), cout, spec.dense_layers, rng, device))
                .collect::<Result<_>>()?;
            decoder.push(DecoderStage { up, fuse, blocks });
        }
        let head = store.conv2d("head", spec.channels(0), 3, 3, 0.1, rng, device)?;
        Ok(Self {
            spec: spec.clone(),
            stem,
            encoder,
            decoder,
            head,
            params: store,
        })
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Encoder taps, one per downsampling stage, finest first.
    pub fn encode(&self, x: &Tensor) -> Result<FeatureStack> {
        let (x, _) = self.pad(x)?;
        let (_, taps) = self.encode_padded(&x)?;
        Ok(taps)
    }

    fn encode_padded(&self, x: &Tensor) -> Result<(Vec<Tensor>, FeatureStack)> {
        let mut h = leaky_relu(&self.stem.forward(x, 1, 1)?)?;
        let mut skips = vec![h.clone()];
        let mut taps = FeatureStack::default();
        for (i, stage) in self.encoder.iter().enumerate() {
            h = leaky_relu(&stage.down.forward(&h, 2, 1)?)?;
            for block in &stage.blocks {
                h = block.forward(&h)?;
            }
            taps.insert(i + 1, h.clone());
            skips.push(h.clone());
        }
        Ok((skips, taps))
    }

    fn pad(&self, x: &Tensor) -> Result<(Tensor, (usize, usize))> {
        let (_, _, h, w) = x.dims4()?;
        let m = 1usize << self.spec.depth;
        let (ph, pw) = ((m - h % m) % m, (m - w % m) % m);
        let mut x = x.clone();
        if ph > 0 {
            x = x.pad_with_zeros(2, 0, ph)?;
        }
        if pw > 0 {
            x = x.pad_with_zeros(3, 0, pw)?;
        }
        Ok((x, (h, w)))
    }

    /// Full forward pass; returns the output image and the encoder taps.
    ///
    /// Inputs whose sides are not multiples of `2^depth` are zero-padded
    /// bottom/right and the output is cropped back.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, FeatureStack)> {
        let (_, c, _, _) = x.dims4()?;
        if c != 3 {
            return Err(Error::shape(format!("generator expects 3 channels, got {c}")));
        }
        let (xp, (h, w)) = self.pad(x)?;
        let (mut skips, taps) = self.encode_padded(&xp)?;
        let mut y = skips.pop().expect("encoder produced the bottleneck");
        for stage in &self.decoder {
            let skip = skips.pop().expect("one skip per decoder stage");
            let (_, _, sh, sw) = skip.dims4()?;
            y = y.upsample_nearest2d(sh, sw)?;
            y = leaky_relu(&stage.up.forward(&y, 1, 1)?)?;
            y = leaky_relu(&stage.fuse.forward(&Tensor::cat(&[&y, &skip], 1)?, 1, 0)?)?;
            for block in &stage.blocks {
                y = block.forward(&y)?;
            }
        }
        let residual = self.head.forward(&y, 1, 1)?;
        let out = pass_clip(&(xp + residual)?)?;
        let out = out.narrow(D::Minus2, 0, h)?.narrow(D::Minus1, 0, w)?;
        Ok((out, taps))
    }
}
