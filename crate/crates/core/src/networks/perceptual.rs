//! Frozen VGG-16 feature extractor tapped at `relu5_1` and `relu5_3`.
//!
//! Weights are read from a safetensors file with torchvision naming
//! (`features.{i}.weight`, `features.{i}.bias`). Parameters are plain tensors,
//! never variables, so no gradient ever updates them.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Environment variable consulted for the weights path.
pub const WEIGHTS_ENV: &str = "UNSHADOW_VGG16_WEIGHTS";

const DOWNLOAD_HINT: &str = "export torchvision's VGG-16 features to safetensors, e.g. \
`python -c \"import torchvision, safetensors.torch as st; \
m = torchvision.models.vgg16(weights='IMAGENET1K_V1'); \
st.save_file({k: v for k, v in m.state_dict().items() if k.startswith('features.')}, 'vgg16.safetensors')\"` \
and point UNSHADOW_VGG16_WEIGHTS (or paths.perceptual_weights) at the file";

const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// `Some(c)` = 3×3 conv to `c` channels (followed by ReLU), `None` = 2×2 max-pool.
const VGG16_LAYOUT: [Option<usize>; 17] = [
    Some(64),
    Some(64),
    None,
    Some(128),
    Some(128),
    None,
    Some(256),
    Some(256),
    Some(256),
    None,
    Some(512),
    Some(512),
    Some(512),
    None,
    Some(512),
    Some(512),
    Some(512),
];

/// Index of the stage-5 convolutions among the 13 convs.
const RELU5_1: usize = 10;
const RELU5_3: usize = 12;

#[derive(Clone, Debug)]
struct ConvLayer {
    weight: Tensor,
    bias: Tensor,
    /// torchvision `features` index.
    index: usize,
}

/// 2×2 stride-2 max-pool (odd trailing rows/columns dropped) built from a
/// reshape and two max reductions, whose backward passes route the full
/// gradient to the maximum; candle's `max_pool2d` backward scales it by 1/4.
fn max_pool2(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (h2, w2) = (h / 2, w / 2);
    let x = x.narrow(2, 0, 2 * h2)?.narrow(3, 0, 2 * w2)?.contiguous()?;
    Ok(x.reshape((n, c, h2, 2, w2, 2))?.max(5)?.max(3)?)
}

#[derive(Clone, Debug)]
pub struct PerceptualExtractor {
    convs: Vec<ConvLayer>,
    width: f64,
    dtype: DType,
}

fn channel_plan(width: f64) -> Vec<Option<usize>> {
    VGG16_LAYOUT
        .iter()
        .map(|l| l.map(|c| ((c as f64 * width).round() as usize).max(1)))
        .collect()
}

impl PerceptualExtractor {
    /// Loads pretrained weights; a missing file is reported with export instructions.
    pub fn load(path: &Path, device: &Device) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingWeights {
                path: path.to_path_buf(),
                hint: DOWNLOAD_HINT.into(),
            });
        }
        let tensors = candle_core::safetensors::load(path, device)?;
        Self::from_tensors(&tensors)
    }

    /// Resolves the weights path from an explicit setting or [`WEIGHTS_ENV`].
    pub fn resolve_path(explicit: Option<&Path>) -> Result<PathBuf> {
        explicit
            .map(Path::to_path_buf)
            .or_else(|| std::env::var_os(WEIGHTS_ENV).map(PathBuf::from))
            .ok_or_else(|| Error::MissingWeights {
                path: PathBuf::from(format!("${WEIGHTS_ENV}")),
                hint: DOWNLOAD_HINT.into(),
            })
    }

    fn from_tensors(tensors: &HashMap<String, Tensor>) -> Result<Self> {
        let mut convs = Vec::new();
        let mut index = 0;
        let mut cin = 3;
        for layer in VGG16_LAYOUT {
            match layer {
                Some(cout) => {
                    let get = |kind: &str| {
                        tensors
                            .get(&format!("features.{index}.{kind}"))
                            .ok_or_else(|| Error::Checkpoint(format!("VGG weights lack features.{index}.{kind}")))
                    };
                    let weight = get("weight")?.to_dtype(DType::F32)?;
                    let bias = get("bias")?.to_dtype(DType::F32)?;
                    if weight.dims() != [cout, cin, 3, 3] {
                        return Err(Error::Checkpoint(format!(
                            "features.{index}.weight has shape {:?}",
                            weight.dims()
                        )));
                    }
                    convs.push(ConvLayer { weight, bias, index });
                    cin = cout;
                    index += 2;
                }
                None => index += 1,
            }
        }
        Ok(Self {
            convs,
            width: 1.0,
            dtype: DType::F32,
        })
    }

    /// Seeded random weights with channels scaled by `width` (1.0 = VGG-16).
    /// Used when no pretrained weights are available, e.g. toy runs and tests.
    pub fn random<R: Rng + ?Sized>(width: f64, rng: &mut R, device: &Device) -> Result<Self> {
        let mut convs = Vec::new();
        let mut index = 0;
        let mut cin = 3;
        for layer in channel_plan(width) {
            match layer {
                Some(cout) => {
                    let std = (2.0 / (9 * cin) as f64).sqrt() as f32;
                    let normal = Normal::new(0.0f32, std).expect("positive std");
                    let w: Vec<f32> = (0..cout * cin * 9).map(|_| normal.sample(rng)).collect();
                    convs.push(ConvLayer {
                        weight: Tensor::from_vec(w, (cout, cin, 3, 3), device)?,
                        bias: Tensor::zeros(cout, DType::F32, device)?,
                        index,
                    });
                    cin = cout;
                    index += 2;
                }
                None => index += 1,
            }
        }
        Ok(Self {
            convs,
            width,
            dtype: DType::F32,
        })
    }

    pub fn width(&self) -> f64 {
        self.width
    }

    /// Copy of the extractor computing in `dtype`.
    pub fn with_dtype(&self, dtype: DType) -> Result<Self> {
        Ok(Self {
            convs: self
                .convs
                .iter()
                .map(|c| {
                    Ok(ConvLayer {
                        weight: c.weight.to_dtype(dtype)?,
                        bias: c.bias.to_dtype(dtype)?,
                        index: c.index,
                    })
                })
                .collect::<Result<_>>()?,
            width: self.width,
            dtype,
        })
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// torchvision `features` indices of the two tapped ReLUs.
    pub fn tap_indices(&self) -> [usize; 2] {
        [self.convs[RELU5_1].index + 1, self.convs[RELU5_3].index + 1]
    }

    /// `relu5_1` and `relu5_3` activations of an `N×3×H×W` image in `[0, 1]`.
    pub fn features(&self, x: &Tensor) -> Result<[Tensor; 2]> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 {
            return Err(Error::shape(format!("extractor expects 3 channels, got {c}")));
        }
        if h < 16 || w < 16 {
            return Err(Error::shape(format!("extractor needs at least 16x16 input, got {h}x{w}")));
        }
        let dev = x.device();
        let mean = Tensor::new(&IMAGENET_MEAN, dev)?.to_dtype(self.dtype)?.reshape((1, 3, 1, 1))?;
        let std = Tensor::new(&IMAGENET_STD, dev)?.to_dtype(self.dtype)?.reshape((1, 3, 1, 1))?;
        let mut y = x.to_dtype(self.dtype)?.broadcast_sub(&mean)?.broadcast_div(&std)?;
        let mut conv_i = 0;
        let mut relu5_1 = None;
        for layer in VGG16_LAYOUT {
            match layer {
                Some(_) => {
                    let c = &self.convs[conv_i];
                    y = y
                        .conv2d(&c.weight, 1, 1, 1, 1)?
                        .broadcast_add(&c.bias.reshape((1, (), 1, 1))?)?
                        .relu()?;
                    if conv_i == RELU5_1 {
                        relu5_1 = Some(y.clone());
                    }
                    if conv_i == RELU5_3 {
                        return Ok([relu5_1.expect("relu5_1 precedes relu5_3"), y]);
                    }
                    conv_i += 1;
                }
                None => y = max_pool2(&y)?,
            }
        }
        unreachable!("VGG16 layout always reaches relu5_3")
    }
}
