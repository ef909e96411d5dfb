//! Training objectives. Every function takes and returns candle tensors so
//! gradients flow through it; inputs may be `f32` or `f64`.
//!
//! Image tensors are `N×3×H×W`, masks `N×1×H×W` with values in {0, 1},
//! embeddings `count × dim`.

use candle_core::{CpuStorage, CustomOp1, DType, Layout, Shape, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::{LayerEmbeddings, PerceptualExtractor};

/// Default InfoNCE temperature.
pub const DEFAULT_TAU: f64 = 0.07;

/// Denominator guard of the colour-angle loss.
pub const COLOR_EPS: f64 = 1e-8;

/// Query/positive/negative embeddings for one InfoNCE evaluation.
///
/// `query` and `positive` are `N×d` and paired row by row; `negatives` is
/// `M×d` and every negative serves every query.
#[derive(Clone, Debug)]
pub struct NceBatch<'a> {
    pub query: &'a Tensor,
    pub positive: &'a Tensor,
    pub negatives: &'a Tensor,
    pub tau: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub pixel: f64,
    pub color: f64,
    pub style: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            pixel: 1.0,
            color: 1.0,
            style: 1.0e4,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (k, v) in [("pixel", self.pixel), ("color", self.color), ("style", self.style)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(format!("train.supervised_weights.{k}"), "must be finite and >= 0"));
            }
        }
        Ok(())
    }
}

/// Mean over queries of `-log softmax` of the positive logit among the
/// positive and all negatives, with logits `x·y/τ`.
pub fn info_nce(batch: &NceBatch) -> Result<Tensor> {
    let NceBatch {
        query,
        positive,
        negatives,
        tau,
    } = *batch;
    if !(tau > 0.0) {
        return Err(Error::contract(format!("temperature must be positive, got {tau}")));
    }
    let (n, d) = query.dims2()?;
    if positive.dims2()? != (n, d) {
        return Err(Error::shape(format!(
            "query {:?} and positive {:?} must have equal shape",
            query.dims(),
            positive.dims()
        )));
    }
    let (_, dn) = negatives.dims2()?;
    if dn != d {
        return Err(Error::shape(format!("negatives have dim {dn}, queries {d}")));
    }
    let pos = (query * positive)?.sum_keepdim(1)?.affine(1.0 / tau, 0.0)?;
    let neg = query.matmul(&negatives.t()?)?.affine(1.0 / tau, 0.0)?;
    let logits = Tensor::cat(&[&pos, &neg], 1)?;
    // The shift cancels analytically, so it can be detached.
    let m = logits.max_keepdim(1)?.detach();
    let lse = (logits.broadcast_sub(&m)?.exp()?.sum_keepdim(1)?.log()? + m)?;
    Ok((lse - pos)?.mean_all()?)
}

/// Sum over layers of [`info_nce`] with query `f_l`, positive `b_l` and
/// negatives `s_l`.
pub fn layerwise_nce(f: &LayerEmbeddings, b: &LayerEmbeddings, s: &LayerEmbeddings, tau: f64) -> Result<Tensor> {
    let keys = |e: &LayerEmbeddings| e.0.keys().copied().collect::<Vec<_>>();
    if keys(f) != keys(b) || keys(f) != keys(s) {
        return Err(Error::contract(format!(
            "layer ids differ: query {:?}, positive {:?}, negative {:?}",
            keys(f),
            keys(b),
            keys(s)
        )));
    }
    if f.0.is_empty() {
        return Err(Error::contract("no layers to contrast"));
    }
    let mut total: Option<Tensor> = None;
    for (l, q) in &f.0 {
        let term = info_nce(&NceBatch {
            query: q,
            positive: &b.0[l],
            negatives: &s.0[l],
            tau,
        })?;
        total = Some(match total {
            None => term,
            Some(t) => (t + term)?,
        });
    }
    Ok(total.expect("at least one layer"))
}

/// The Refinement network's contrastive term; same machinery as
/// [`layerwise_nce`] with query = refined output, positive = its augmented
/// copy, negative = the shadow input.
pub fn refinement_nce(
    refined: &LayerEmbeddings,
    positive: &LayerEmbeddings,
    negative: &LayerEmbeddings,
    tau: f64,
) -> Result<Tensor> {
    layerwise_nce(refined, positive, negative, tau)
}

/// Mean absolute difference over mask support and channels.
pub fn masked_l1(a: &Tensor, b: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let (_, c, _, _) = a.dims4()?;
    let support = mask.to_dtype(DType::F64)?.sum_all()?.to_scalar::<f64>()?;
    if support == 0.0 {
        return Err(Error::contract("loss support mask is empty"));
    }
    let diff = (a - b)?.abs()?.broadcast_mul(&mask.to_dtype(a.dtype())?)?;
    Ok(diff.sum_all()?.affine(1.0 / (support * c as f64), 0.0)?)
}

/// `𝒟(x)` against `x` for a shadow-free sample, restricted to its support.
pub fn identity_loss(output: &Tensor, input: &Tensor, mask: &Tensor) -> Result<Tensor> {
    masked_l1(output, input, mask)
}

/// Mean of `(1 − score)²` over the critic's patch map.
pub fn critic_distill_loss(scores: &Tensor) -> Result<Tensor> {
    Ok(scores.affine(-1.0, 1.0)?.sqr()?.mean_all()?)
}

/// Least-squares GAN objectives.
///
/// `fake` are critic scores of generated samples and `real` the score maps of
/// every real sample set. Returns `(gen_loss, critic_loss)` where
/// `gen_loss = mean (1 − fake)²` and
/// `critic_loss = mean fake² + mean_k mean (1 − real_k)²`. Callers pass a
/// detached `fake` for the critic update and apply each loss only to its own
/// network's parameters.
pub fn adversarial_losses(fake: &Tensor, real: &[&Tensor]) -> Result<(Tensor, Tensor)> {
    if real.is_empty() {
        return Err(Error::contract("critic needs at least one real score map"));
    }
    let gen = critic_distill_loss(fake)?;
    let mut real_term: Option<Tensor> = None;
    for r in real {
        let t = r.affine(-1.0, 1.0)?.sqr()?.mean_all()?;
        real_term = Some(match real_term {
            None => t,
            Some(acc) => (acc + t)?,
        });
    }
    let real_term = real_term.expect("non-empty").affine(1.0 / real.len() as f64, 0.0)?;
    let critic = (fake.sqr()?.mean_all()? + real_term)?;
    Ok((gen, critic))
}

/// `(1/N)·Σ|S_f − B|` over the shared support.
pub fn illumination_loss(removed: &Tensor, bright: &Tensor, mask: &Tensor) -> Result<Tensor> {
    masked_l1(removed, bright, mask)
}

/// Half the sum over both extractor taps of the per-element mean squared
/// feature difference.
pub fn refinement_perceptual(vgg: &PerceptualExtractor, refined: &Tensor, input: &Tensor) -> Result<Tensor> {
    let fa = vgg.features(refined)?;
    let fb = vgg.features(input)?;
    let a = (&fa[0] - &fb[0])?.sqr()?.mean_all()?;
    let b = (&fa[1] - &fb[1])?.sqr()?.mean_all()?;
    Ok((a + b)?.affine(0.5, 0.0)?)
}

/// Mean absolute error over all pixels and channels.
pub fn pixel_loss(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    Ok((pred - gt)?.abs()?.mean_all()?)
}

struct Acos;

impl CustomOp1 for Acos {
    fn name(&self) -> &'static str {
        "acos"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (start, end) = layout
            .contiguous_offsets()
            .ok_or_else(|| candle_core::Error::Msg("acos expects a contiguous input".into()))?;
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(v[start..end].iter().map(|x| x.acos()).collect()),
            CpuStorage::F64(v) => CpuStorage::F64(v[start..end].iter().map(|x| x.acos()).collect()),
            _ => candle_core::bail!("acos supports f32 and f64 only"),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        // d/dx acos(x) = −1/√(1−x²); the floor keeps |x| → 1 finite.
        let denom = arg.sqr()?.affine(-1.0, 1.0)?.maximum(1e-12)?.sqrt()?;
        Ok(Some(grad_res.neg()?.div(&denom)?))
    }
}

/// Elementwise arccos with a finite gradient at ±1.
pub fn acos(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Acos)?)
}

/// Mean over pixels of the angle between the RGB vectors of `pred` and `gt`.
/// Pixels where either vector is zero contribute 0.
pub fn color_loss(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    let dot = (pred * gt)?.sum_keepdim(1)?;
    // The tiny offset keeps the square-root gradient finite at black pixels.
    let sp = pred.sqr()?.sum_keepdim(1)?;
    let sg = gt.sqr()?.sum_keepdim(1)?;
    let norms = ((&sp + 1e-30)?.sqrt()? * (&sg + 1e-30)?.sqrt()?)?;
    let cos = dot.div(&norms.maximum(COLOR_EPS)?)?.clamp(-1.0, 1.0)?;
    let angle = acos(&cos)?;
    let nonzero = (sp.gt(0.0)?.to_dtype(pred.dtype())? * sg.gt(0.0)?.to_dtype(pred.dtype())?)?;
    Ok((angle * nonzero)?.mean_all()?)
}

/// Gram matrix `V Vᵀ / (C·H·W)` of `N×C×H×W` (or `C×H×W`) features.
pub fn gram(features: &Tensor) -> Result<Tensor> {
    let f = match features.rank() {
        3 => features.unsqueeze(0)?,
        4 => features.clone(),
        r => return Err(Error::shape(format!("gram expects rank 3 or 4, got {r}"))),
    };
    let (n, c, h, w) = f.dims4()?;
    let v = f.reshape((n, c, h * w))?;
    let g = v.matmul(&v.transpose(1, 2)?)?.affine(1.0 / (c * h * w) as f64, 0.0)?;
    Ok(if features.rank() == 3 { g.squeeze(0)? } else { g })
}

/// Mean over both extractor taps of the squared Frobenius distance between
/// Gram matrices.
pub fn style_loss(vgg: &PerceptualExtractor, pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    let fp = vgg.features(pred)?;
    let fg = vgg.features(gt)?;
    style_from_features(&fp, &fg)
}

fn style_from_features(fp: &[Tensor; 2], fg: &[Tensor; 2]) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for (a, b) in fp.iter().zip(fg) {
        let t = (gram(a)? - gram(b)?)?.sqr()?.sum_all()?;
        total = Some(match total {
            None => t,
            Some(acc) => (acc + t)?,
        });
    }
    Ok(total.expect("two taps").affine(0.5, 0.0)?)
}

/// Individual supervised terms, unweighted.
#[derive(Clone, Debug)]
pub struct SupervisedTerms {
    pub pixel: Tensor,
    pub color: Tensor,
    pub style: Tensor,
}

impl SupervisedTerms {
    pub fn weighted(&self, w: &LossWeights) -> Result<Tensor> {
        let p = self.pixel.affine(w.pixel, 0.0)?;
        let c = self.color.affine(w.color, 0.0)?;
        let s = self.style.affine(w.style, 0.0)?;
        Ok(((p + c)? + s)?)
    }
}

pub fn supervised_terms(vgg: &PerceptualExtractor, pred: &Tensor, gt: &Tensor) -> Result<SupervisedTerms> {
    Ok(SupervisedTerms {
        pixel: pixel_loss(pred, gt)?,
        color: color_loss(pred, gt)?,
        style: style_loss(vgg, pred, gt)?,
    })
}

/// `λ1·pixel + λ2·color + λ3·style`.
pub fn supervised_total(vgg: &PerceptualExtractor, pred: &Tensor, gt: &Tensor, w: &LossWeights) -> Result<Tensor> {
    w.validate()?;
    supervised_terms(vgg, pred, gt)?.weighted(w)
}

/// Reads a scalar loss as `f64`.
pub fn value(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Sum of a list of scalar tensors.
pub fn sum(terms: &[Tensor]) -> Result<Tensor> {
    let first = terms.first().ok_or_else(|| Error::contract("empty loss sum"))?;
    let mut acc = first.clone();
    for t in &terms[1..] {
        acc = (acc + t)?;
    }
    Ok(acc)
}

fn ensure_same_support(a: &Tensor, b: &Tensor) -> Result<()> {
    let diff = (a - b)?.abs()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if diff != 0.0 {
        return Err(Error::contract("support masks differ"));
    }
    Ok(())
}

/// Checks that two regions share their support before comparing them.
pub fn illumination_loss_checked(removed: &Tensor, bright: &Tensor, mask_a: &Tensor, mask_b: &Tensor) -> Result<Tensor> {
    ensure_same_support(mask_a, mask_b)?;
    illumination_loss(removed, bright, mask_a)
}
