//! Data transformations: shadow inpainting, standard geometric/photometric
//! augmentation, critic illumination variants, refinement positives and the
//! curriculum difficulty score.
//!
//! Every randomized function takes an explicit generator; the same seed and
//! call order reproduce the same outputs.

use ndarray::{s, Array3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datasets::{find_nonshadow_window, ShadowTriplet};
use crate::error::{Error, Result};
use crate::imaging::{
    adjust_brightness, gaussian_blur, luma, nearest_source, resize, ImageTensor, RegionTensor, ShadowMask,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationConfig {
    pub flip_prob: f64,
    pub scale_range: (f64, f64),
    /// Probability of each photometric transform (noise, blur, contrast).
    pub photometric_prob: f64,
    pub noise_sigma: f64,
    pub blur_sigma: f64,
    pub contrast_range: (f64, f64),
    pub inpaint_enabled: bool,
    /// Illuminance factor (percent) for the critic's brightened variants.
    pub mu: f64,
    /// Maximum fraction of a bank mask allowed to overlap the existing shadow.
    pub inpaint_max_overlap: f64,
    pub inpaint_attempts: usize,
    /// Relative jitter applied to the measured shadow mean when inpainting.
    pub inpaint_jitter: f64,
    pub positive: PositiveConfig,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.3,
            scale_range: (0.8, 1.2),
            photometric_prob: 0.5,
            noise_sigma: 0.01,
            blur_sigma: 1.0,
            contrast_range: (0.8, 1.2),
            inpaint_enabled: true,
            mu: 75.0,
            inpaint_max_overlap: 0.01,
            inpaint_attempts: 50,
            inpaint_jitter: 0.05,
            positive: PositiveConfig::default(),
        }
    }
}

impl AugmentationConfig {
    /// No randomness at all; `standard_augment` becomes the identity.
    pub fn identity() -> Self {
        Self {
            flip_prob: 0.0,
            scale_range: (1.0, 1.0),
            photometric_prob: 0.0,
            inpaint_enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |key: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::config(format!("augment.{key}"), format!("{v} is not a probability")))
            }
        };
        unit("flip_prob", self.flip_prob)?;
        unit("photometric_prob", self.photometric_prob)?;
        unit("inpaint_max_overlap", self.inpaint_max_overlap)?;
        unit("positive.cutout_prob", self.positive.cutout_prob)?;
        let range = |key: &str, (lo, hi): (f64, f64)| {
            if lo <= hi && lo > 0.0 {
                Ok(())
            } else {
                Err(Error::config(format!("augment.{key}"), format!("invalid range ({lo}, {hi})")))
            }
        };
        range("scale_range", self.scale_range)?;
        range("contrast_range", self.contrast_range)?;
        range("positive.crop_fraction", self.positive.crop_fraction)?;
        if self.positive.crop_fraction.1 > 1.0 {
            return Err(Error::config("augment.positive.crop_fraction", "upper bound exceeds 1"));
        }
        if self.noise_sigma < 0.0 || self.blur_sigma < 0.0 {
            return Err(Error::config("augment.noise_sigma", "sigmas must be non-negative"));
        }
        if self.mu < -95.0 {
            return Err(Error::config("augment.mu", "illuminance factor below -95 yields negative gain"));
        }
        Ok(())
    }
}

/// Randomization ranges for refinement positives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PositiveConfig {
    /// Crop side as a fraction of the shorter image side.
    pub crop_fraction: (f64, f64),
    pub cutout_prob: f64,
    /// Cutout rectangle side as a fraction of the image side; `max <= 0.5`
    /// bounds the area by a quarter of the frame.
    pub cutout_fraction: (f64, f64),
    pub blur_sigma_max: f64,
    pub noise_sigma_max: f64,
}

impl Default for PositiveConfig {
    fn default() -> Self {
        Self {
            crop_fraction: (0.5, 0.9),
            cutout_prob: 1.0,
            cutout_fraction: (0.1, 0.5),
            blur_sigma_max: 2.0,
            noise_sigma_max: 0.02,
        }
    }
}

impl PositiveConfig {
    pub fn disabled() -> Self {
        Self {
            crop_fraction: (1.0, 1.0),
            cutout_prob: 0.0,
            cutout_fraction: (0.1, 0.5),
            blur_sigma_max: 0.0,
            noise_sigma_max: 0.0,
        }
    }
}

/// Training-set shadow masks available for inpainting.
#[derive(Clone, Debug, Default)]
pub struct MaskBank {
    pub masks: Vec<ShadowMask>,
}

impl MaskBank {
    pub fn new(masks: Vec<ShadowMask>) -> Self {
        Self { masks }
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }
}

fn mean_over(image: &ImageTensor, mask: &ShadowMask) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((y, x, _), v) in image.data().indexed_iter() {
        if mask.get(y, x) {
            sum += *v as f64;
            n += 1;
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// Darkens the area under `new_mask` (minus the existing shadow) so its mean
/// becomes `(1 + jitter)` times the existing shadow mean.
///
/// Returns `None` when the new mask adds no pixels.
pub fn inpaint_with(triplet: &ShadowTriplet, new_mask: &ShadowMask, jitter: f64) -> Result<Option<ShadowTriplet>> {
    let shadow_mean = mean_over(&triplet.shadow, &triplet.mask)
        .ok_or_else(|| Error::contract("inpainting needs an existing shadow region"))?;
    let new_mask = if new_mask.dims() == triplet.dims() {
        new_mask.clone()
    } else {
        new_mask.resize_nearest(triplet.dims().0, triplet.dims().1)?
    };
    let target = ShadowMask::from_fn(new_mask.height(), new_mask.width(), |y, x| {
        new_mask.get(y, x) && !triplet.mask.get(y, x)
    });
    let Some(current) = mean_over(&triplet.shadow, &target) else {
        return Ok(None);
    };
    if current <= 0.0 {
        return Ok(None);
    }
    let gain = (shadow_mean * (1.0 + jitter) / current) as f32;
    let mut data = triplet.shadow.data().clone();
    for ((y, x, _), v) in data.indexed_iter_mut() {
        if target.get(y, x) {
            *v = (*v * gain).clamp(0.0, 1.0);
        }
    }
    let mut out = triplet.clone();
    out.shadow = ImageTensor::new(data)?;
    out.mask = triplet.mask.union(&target)?;
    Ok(Some(out))
}

/// Transplants a random bank mask onto a non-shadow area and darkens it to the
/// measured shadow mean (jittered uniformly by ±`cfg.inpaint_jitter`).
pub fn inpaint_shadow<R: Rng + ?Sized>(
    triplet: &ShadowTriplet,
    bank: &MaskBank,
    cfg: &AugmentationConfig,
    rng: &mut R,
) -> Result<ShadowTriplet> {
    if bank.is_empty() {
        return Err(Error::config("augment.inpaint_enabled", "mask bank is empty"));
    }
    if triplet.mask.is_empty() {
        return Err(Error::contract("inpainting needs an existing shadow region"));
    }
    let (h, w) = triplet.dims();
    for _ in 0..cfg.inpaint_attempts {
        let pick = &bank.masks[rng.random_range(0..bank.masks.len())];
        let candidate = if pick.dims() == (h, w) {
            pick.clone()
        } else {
            pick.resize_nearest(h, w)?
        };
        let size = candidate.count();
        if size == 0 {
            continue;
        }
        let overlap = candidate.intersection_count(&triplet.mask)? as f64 / size as f64;
        if overlap >= cfg.inpaint_max_overlap {
            continue;
        }
        let jitter = rng.random_range(-cfg.inpaint_jitter..=cfg.inpaint_jitter);
        if let Some(out) = inpaint_with(triplet, &candidate, jitter)? {
            return Ok(out);
        }
    }
    log::debug!("inpainting skipped for `{}`: no non-overlapping bank mask", triplet.id);
    Ok(triplet.clone())
}

/// Source index maps for a geometric transform (flip, then isotropic scale
/// with centre crop / replicate pad back to the original size).
struct Remap {
    ys: Vec<usize>,
    xs: Vec<usize>,
}

impl Remap {
    fn new(h: usize, w: usize, flip: bool, scale: f64) -> Self {
        let axis = |n: usize| -> Vec<usize> {
            let scaled = ((n as f64 * scale).round() as usize).max(1);
            let offset = (scaled as isize - n as isize) / 2;
            (0..n)
                .map(|i| {
                    let j = (i as isize + offset).clamp(0, scaled as isize - 1) as usize;
                    nearest_source(j, scaled, n)
                })
                .collect()
        };
        let ys = axis(h);
        let mut xs = axis(w);
        if flip {
            xs = xs.into_iter().map(|x| w - 1 - x).collect();
        }
        Self { ys, xs }
    }

    fn image(&self, img: &ImageTensor) -> ImageTensor {
        let d = img.data();
        ImageTensor::from_fn(self.ys.len(), self.xs.len(), |y, x, c| d[[self.ys[y], self.xs[x], c]])
    }

    fn mask(&self, m: &ShadowMask) -> ShadowMask {
        ShadowMask::from_fn(self.ys.len(), self.xs.len(), |y, x| m.get(self.ys[y], self.xs[x]))
    }
}

enum Photometric {
    Noise(Array3<f32>),
    Blur(f64),
    Contrast(f32),
}

impl Photometric {
    fn apply(&self, img: &ImageTensor) -> ImageTensor {
        match self {
            Photometric::Noise(n) => {
                let mut d = img.data().clone();
                d.zip_mut_with(n, |v, e| *v = (*v + e).clamp(0.0, 1.0));
                ImageTensor::new(d).expect("finite")
            }
            Photometric::Blur(sigma) => gaussian_blur(img, *sigma),
            Photometric::Contrast(k) => {
                let d = img.data().mapv(|v| ((v - 0.5) * k + 0.5).clamp(0.0, 1.0));
                ImageTensor::new(d).expect("finite")
            }
        }
    }
}

/// Flip + scale (geometric, applied to S, mask and G) followed by independent
/// noise / blur / contrast (photometric, applied identically to S and G only).
pub fn standard_augment<R: Rng + ?Sized>(
    triplet: &ShadowTriplet,
    cfg: &AugmentationConfig,
    rng: &mut R,
) -> Result<ShadowTriplet> {
    let (h, w) = triplet.dims();
    let flip = rng.random_bool(cfg.flip_prob);
    let (lo, hi) = cfg.scale_range;
    let scale = if lo < hi { rng.random_range(lo..=hi) } else { lo };
    let mut out = triplet.clone();
    if flip || (scale - 1.0).abs() > f64::EPSILON {
        let remap = Remap::new(h, w, flip, scale);
        out.shadow = remap.image(&triplet.shadow);
        out.mask = remap.mask(&triplet.mask);
        out.shadow_free = triplet.shadow_free.as_ref().map(|g| remap.image(g));
    }

    let mut ops = Vec::new();
    if rng.random_bool(cfg.photometric_prob) && cfg.noise_sigma > 0.0 {
        let normal = Normal::new(0.0f32, cfg.noise_sigma as f32).expect("sigma checked");
        ops.push(Photometric::Noise(Array3::from_shape_fn((h, w, 3), |_| normal.sample(rng))));
    }
    if rng.random_bool(cfg.photometric_prob) && cfg.blur_sigma > 0.0 {
        ops.push(Photometric::Blur(rng.random_range(0.0..=cfg.blur_sigma)));
    }
    if rng.random_bool(cfg.photometric_prob) {
        let (lo, hi) = cfg.contrast_range;
        ops.push(Photometric::Contrast(if lo < hi { rng.random_range(lo..=hi) } else { lo } as f32));
    }
    for op in &ops {
        out.shadow = op.apply(&out.shadow);
        out.shadow_free = out.shadow_free.as_ref().map(|g| op.apply(g));
    }
    Ok(out)
}

/// Brightness levels `{mu-5, mu, mu+5}` in percent.
pub fn illumination_levels(mu: f64) -> [f64; 3] {
    [mu - 5.0, mu, mu + 5.0]
}

/// The critic's three brightened copies of a shadow region at `{mu-5, mu, mu+5}`.
pub fn illumination_variants(region: &RegionTensor, mu: f64) -> Result<[RegionTensor; 3]> {
    if !(mu >= 5.0) {
        return Err(Error::contract(format!("illuminance factor must be >= 5, got {mu}")));
    }
    brightness_variants(region, mu)
}

/// As [`illumination_variants`] without the `mu >= 5` guard, for the
/// supervised family where levels may be negative (down to -100).
pub fn brightness_variants(region: &RegionTensor, mu: f64) -> Result<[RegionTensor; 3]> {
    let [a, b, c] = illumination_levels(mu);
    Ok([
        adjust_brightness(region, a)?,
        adjust_brightness(region, b)?,
        adjust_brightness(region, c)?,
    ])
}

/// What a call to [`refinement_positive_traced`] actually did.
#[derive(Clone, Debug, PartialEq)]
pub struct PositiveTrace {
    /// `(y0, x0, side)` of the crop, or `None` for the full frame.
    pub crop: Option<(usize, usize, usize)>,
    /// `(y0, x0, h, w)` of the cutout rectangle.
    pub cutout: Option<(usize, usize, usize, usize)>,
    pub blur_sigma: f64,
    pub noise_sigma: f64,
}

pub fn refinement_positive<R: Rng + ?Sized>(
    image: &ImageTensor,
    mask: &ShadowMask,
    cfg: &PositiveConfig,
    rng: &mut R,
) -> Result<ImageTensor> {
    refinement_positive_traced(image, mask, cfg, rng).map(|(img, _)| img)
}

/// Non-shadow crop, resize back, cutout, blur and noise.
pub fn refinement_positive_traced<R: Rng + ?Sized>(
    image: &ImageTensor,
    mask: &ShadowMask,
    cfg: &PositiveConfig,
    rng: &mut R,
) -> Result<(ImageTensor, PositiveTrace)> {
    crate::imaging::check_dims(image.dims(), mask.dims(), "refinement_positive")?;
    let (h, w) = image.dims();
    let min_side = h.min(w);
    let (lo, hi) = cfg.crop_fraction;
    let frac = if lo < hi { rng.random_range(lo..=hi) } else { lo };
    let side = ((frac * min_side as f64).round() as usize).clamp(1, min_side);

    let mut trace = PositiveTrace {
        crop: None,
        cutout: None,
        blur_sigma: 0.0,
        noise_sigma: 0.0,
    };
    let mut out = if side == h && side == w {
        image.clone()
    } else {
        match find_nonshadow_window(mask, (side, side), rng) {
            Ok((y0, x0)) => {
                trace.crop = Some((y0, x0, side));
                let crop = ImageTensor::new(image.data().slice(s![y0..y0 + side, x0..x0 + side, ..]).to_owned())?;
                resize(&crop, h, w)?
            }
            Err(Error::SamplingExhausted { .. }) => {
                log::debug!("refinement positive: no non-shadow crop, using full frame");
                image.clone()
            }
            Err(e) => return Err(e),
        }
    };

    if rng.random_bool(cfg.cutout_prob) {
        let (flo, fhi) = cfg.cutout_fraction;
        let pick = |n: usize, rng: &mut R| {
            let f = if flo < fhi { rng.random_range(flo..=fhi) } else { flo };
            ((f * n as f64).floor() as usize).clamp(1, n)
        };
        let ch = pick(h, rng);
        let cw = pick(w, rng);
        let y0 = rng.random_range(0..=h - ch);
        let x0 = rng.random_range(0..=w - cw);
        let fill = out.channel_means();
        for y in y0..y0 + ch {
            for x in x0..x0 + cw {
                for (c, f) in fill.iter().enumerate() {
                    out.data_mut()[[y, x, c]] = *f;
                }
            }
        }
        trace.cutout = Some((y0, x0, ch, cw));
    }

    if cfg.blur_sigma_max > 0.0 {
        trace.blur_sigma = rng.random_range(0.0..=cfg.blur_sigma_max);
        out = gaussian_blur(&out, trace.blur_sigma);
    }
    if cfg.noise_sigma_max > 0.0 {
        trace.noise_sigma = rng.random_range(0.0..=cfg.noise_sigma_max);
        if trace.noise_sigma > 0.0 {
            let normal = Normal::new(0.0f32, trace.noise_sigma as f32).expect("sigma positive");
            out.data_mut().mapv_inplace(|v| (v + normal.sample(rng)).clamp(0.0, 1.0));
        }
    }
    Ok((out, trace))
}

/// Difficulty in `[0, 1]`: `0.5·coverage + 0.5·(1 − contrast)`, where contrast
/// is the clamped luma gap between lit and shadowed pixels. Lower is easier.
pub fn curriculum_score(triplet: &ShadowTriplet) -> f64 {
    let coverage = triplet.mask.coverage();
    let (mut lit, mut n_lit, mut dark, mut n_dark) = (0.0, 0usize, 0.0, 0usize);
    let (h, w) = triplet.dims();
    for y in 0..h {
        for x in 0..w {
            let l = luma(triplet.shadow.pixel(y, x));
            if triplet.mask.get(y, x) {
                dark += l;
                n_dark += 1;
            } else {
                lit += l;
                n_lit += 1;
            }
        }
    }
    if n_lit == 0 {
        log::debug!("curriculum score: `{}` has no lit pixels", triplet.id);
    }
    let lit_mean = if n_lit > 0 { lit / n_lit as f64 } else { 0.0 };
    let dark_mean = if n_dark > 0 { dark / n_dark as f64 } else { 0.0 };
    let contrast = (lit_mean - dark_mean).clamp(0.0, 1.0);
    0.5 * coverage + 0.5 * (1.0 - contrast)
}

/// Convenience for building a bank from decoded triplets.
pub fn bank_from_masks<'a>(masks: impl IntoIterator<Item = &'a ShadowMask>) -> MaskBank {
    MaskBank::new(masks.into_iter().filter(|m| !m.is_empty()).cloned().collect())
}
