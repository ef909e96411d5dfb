//! Pixel containers and the per-pixel primitives every other module builds on.
//!
//! Images are `H×W×3` float arrays in `[0, 1]`, masks are boolean `H×W` maps
//! where `true` marks a shadow pixel.

use candle_core::{DType, Device, Tensor};
use ndarray::{Array2, Array3, Axis, Zip};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    data: Array3<f32>,
}

impl ImageTensor {
    /// Wraps an `H×W×3` array. Values are not clipped; use [`ImageTensor::clipped`]
    /// when the source is not already in range.
    pub fn new(data: Array3<f32>) -> Result<Self> {
        let (h, w, c) = data.dim();
        if h == 0 || w == 0 {
            return Err(Error::shape(format!("image must be at least 1x1, got {h}x{w}")));
        }
        if c != 3 {
            return Err(Error::shape(format!("image must have 3 channels, got {c}")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("image contains non-finite values"));
        }
        Ok(Self { data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        Self::from_fn(height, width, |_, _, c| rgb[c])
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize, usize) -> f32) -> Self {
        assert!(height > 0 && width > 0, "image dims must be positive");
        Self {
            data: Array3::from_shape_fn((height, width, 3), |(y, x, c)| f(y, x, c)),
        }
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array3<f32> {
        &mut self.data
    }

    pub fn into_data(self) -> Array3<f32> {
        self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        [self.data[[y, x, 0]], self.data[[y, x, 1]], self.data[[y, x, 2]]]
    }

    pub fn clipped(mut self) -> Self {
        self.data.mapv_inplace(|v| v.clamp(0.0, 1.0));
        self
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut data = self.data.clone();
        data.invert_axis(Axis(1));
        Self { data }
    }

    /// Per-channel mean over all pixels.
    pub fn channel_means(&self) -> [f32; 3] {
        let n = (self.height() * self.width()) as f64;
        let mut acc = [0f64; 3];
        for ((_, _, c), v) in self.data.indexed_iter() {
            acc[c] += *v as f64;
        }
        acc.map(|s| (s / n) as f32)
    }

    /// `1×3×H×W` tensor in the requested float dtype.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let (h, w) = self.dims();
        let chw = self.data.view().permuted_axes([2, 0, 1]);
        let flat: Vec<f32> = chw.iter().copied().collect();
        Ok(Tensor::from_vec(flat, (1, 3, h, w), device)?.to_dtype(dtype)?)
    }

    /// Inverse of [`ImageTensor::to_tensor`]; accepts `1×3×H×W` or `3×H×W`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = match t.rank() {
            4 => t.squeeze(0)?,
            3 => t.clone(),
            r => return Err(Error::shape(format!("expected rank 3 or 4 tensor, got {r}"))),
        };
        let (c, h, w) = t.dims3()?;
        if c != 3 {
            return Err(Error::shape(format!("expected 3 channels, got {c}")));
        }
        let flat: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        let chw = Array3::from_shape_vec((3, h, w), flat).map_err(|e| Error::shape(e.to_string()))?;
        Self::new(chw.permuted_axes([1, 2, 0]).as_standard_layout().to_owned())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShadowMask {
    data: Array2<bool>,
}

impl ShadowMask {
    pub fn new(data: Array2<bool>) -> Result<Self> {
        let (h, w) = data.dim();
        if h == 0 || w == 0 {
            return Err(Error::shape(format!("mask must be at least 1x1, got {h}x{w}")));
        }
        Ok(Self { data })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        assert!(height > 0 && width > 0, "mask dims must be positive");
        Self {
            data: Array2::from_shape_fn((height, width), |(y, x)| f(y, x)),
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::from_fn(height, width, |_, _| false)
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self::from_fn(height, width, |_, _| true)
    }

    /// Binarizes a gray map: values `>= threshold` become shadow.
    pub fn from_threshold(gray: &Array2<f32>, threshold: f32) -> Result<Self> {
        Self::new(gray.mapv(|v| v >= threshold))
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn dims(&self) -> (usize, usize) {
        self.data.dim()
    }

    pub fn data(&self) -> &Array2<bool> {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[[y, x]]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|v| *v)
    }

    /// Fraction of shadow pixels.
    pub fn coverage(&self) -> f64 {
        self.count() as f64 / self.data.len() as f64
    }

    pub fn union(&self, other: &ShadowMask) -> Result<ShadowMask> {
        check_dims(self.dims(), other.dims(), "mask union")?;
        Ok(Self {
            data: Zip::from(&self.data).and(&other.data).map_collect(|a, b| *a || *b),
        })
    }

    pub fn intersection_count(&self, other: &ShadowMask) -> Result<usize> {
        check_dims(self.dims(), other.dims(), "mask intersection")?;
        Ok(Zip::from(&self.data)
            .and(&other.data)
            .fold(0, |acc, a, b| acc + usize::from(*a && *b)))
    }

    pub fn inverted(&self) -> ShadowMask {
        Self {
            data: self.data.mapv(|v| !v),
        }
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut data = self.data.clone();
        data.invert_axis(Axis(1));
        Self { data }
    }

    /// Nearest-neighbour resample; masks never get interpolated values.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::contract("resize target must be positive"));
        }
        let (h, w) = self.dims();
        let data = Array2::from_shape_fn((height, width), |(y, x)| {
            let sy = nearest_source(y, height, h);
            let sx = nearest_source(x, width, w);
            self.data[[sy, sx]]
        });
        Ok(Self { data })
    }

    /// Window `[y0, y0+h) × [x0, x0+w)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Self {
        Self {
            data: self.data.slice(ndarray::s![y0..y0 + h, x0..x0 + w]).to_owned(),
        }
    }

    pub fn to_f32(&self) -> Array2<f32> {
        self.data.mapv(|v| if v { 1.0 } else { 0.0 })
    }

    /// `1×1×H×W` tensor of 0/1 values.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let (h, w) = self.dims();
        let flat: Vec<f32> = self.to_f32().iter().copied().collect();
        Ok(Tensor::from_vec(flat, (1, 1, h, w), device)?.to_dtype(dtype)?)
    }
}

pub(crate) fn nearest_source(dst: usize, dst_len: usize, src_len: usize) -> usize {
    let s = ((dst as f64 + 0.5) * src_len as f64 / dst_len as f64).floor() as usize;
    s.min(src_len - 1)
}

pub(crate) fn check_dims(a: (usize, usize), b: (usize, usize), what: &str) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!(
            "{what}: {}x{} vs {}x{}",
            a.0, a.1, b.0, b.1
        )));
    }
    Ok(())
}

/// Image content restricted to a mask's support; zero elsewhere.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionTensor {
    data: Array3<f32>,
    mask: ShadowMask,
}

impl RegionTensor {
    /// Builds a region from arbitrary data by zeroing everything off-support.
    pub fn masked(mut data: Array3<f32>, mask: ShadowMask) -> Result<Self> {
        let (h, w, c) = data.dim();
        check_dims((h, w), mask.dims(), "region")?;
        if c != 3 {
            return Err(Error::shape(format!("region must have 3 channels, got {c}")));
        }
        for ((y, x, _), v) in data.indexed_iter_mut() {
            if !mask.get(y, x) {
                *v = 0.0;
            }
        }
        Ok(Self { data, mask })
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn mask(&self) -> &ShadowMask {
        &self.mask
    }

    pub fn dims(&self) -> (usize, usize) {
        self.mask.dims()
    }

    /// The region as a full-frame image (zeros off-support).
    pub fn to_image(&self) -> ImageTensor {
        ImageTensor {
            data: self.data.clone(),
        }
    }

    /// Mean value over support pixels and channels; `None` for empty support.
    pub fn support_mean(&self) -> Option<f64> {
        let n = self.mask.count();
        if n == 0 {
            return None;
        }
        let sum: f64 = self.data.iter().map(|v| *v as f64).sum();
        Some(sum / (3 * n) as f64)
    }

    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        self.to_image().to_tensor(dtype, device)
    }

    /// Wraps a network output, re-imposing the support mask.
    pub fn from_tensor(t: &Tensor, mask: ShadowMask) -> Result<Self> {
        let img = ImageTensor::from_tensor(t)?;
        Self::masked(img.into_data(), mask)
    }
}

pub fn extract_region(image: &ImageTensor, mask: &ShadowMask) -> Result<RegionTensor> {
    RegionTensor::masked(image.data.clone(), mask.clone())
}

/// Composites `region` into `image` under `mask`: `S − S·M + R·M`, clipped.
pub fn embed_region(image: &ImageTensor, mask: &ShadowMask, region: &RegionTensor) -> Result<ImageTensor> {
    check_dims(image.dims(), mask.dims(), "embed_region")?;
    if region.mask() != mask {
        return Err(Error::contract("embedded region's support differs from the embedding mask"));
    }
    let mut out = image.data.clone();
    Zip::indexed(&mut out)
        .and(&region.data)
        .for_each(|(y, x, _), o, r| {
            if mask.get(y, x) {
                *o = r.clamp(0.0, 1.0);
            } else {
                *o = o.clamp(0.0, 1.0);
            }
        });
    Ok(ImageTensor { data: out })
}

/// Multiplicative brightness change by `level` percent on the support, clipped.
pub fn adjust_brightness(region: &RegionTensor, level: f64) -> Result<RegionTensor> {
    if !(level >= -100.0) {
        return Err(Error::contract(format!("brightness level must be >= -100, got {level}")));
    }
    let gain = (1.0 + level / 100.0) as f32;
    Ok(RegionTensor {
        data: region.data.mapv(|v| (v * gain).clamp(0.0, 1.0)),
        mask: region.mask.clone(),
    })
}

/// Bilinear resample with half-pixel centres (corners not aligned), clipped.
pub fn resize(image: &ImageTensor, height: usize, width: usize) -> Result<ImageTensor> {
    if height == 0 || width == 0 {
        return Err(Error::contract(format!("resize target must be positive, got {height}x{width}")));
    }
    let (h, w) = image.dims();
    if (h, w) == (height, width) {
        return Ok(image.clone());
    }
    let ys: Vec<(usize, usize, f32)> = (0..height).map(|d| bilinear_taps(d, height, h)).collect();
    let xs: Vec<(usize, usize, f32)> = (0..width).map(|d| bilinear_taps(d, width, w)).collect();
    let src = &image.data;
    let data = Array3::from_shape_fn((height, width, 3), |(y, x, c)| {
        let (y0, y1, fy) = ys[y];
        let (x0, x1, fx) = xs[x];
        let top = src[[y0, x0, c]] * (1.0 - fx) + src[[y0, x1, c]] * fx;
        let bottom = src[[y1, x0, c]] * (1.0 - fx) + src[[y1, x1, c]] * fx;
        (top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0)
    });
    Ok(ImageTensor { data })
}

fn bilinear_taps(dst: usize, dst_len: usize, src_len: usize) -> (usize, usize, f32) {
    let scale = src_len as f64 / dst_len as f64;
    let s = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
    let i0 = (s.floor() as usize).min(src_len - 1);
    let i1 = (i0 + 1).min(src_len - 1);
    let frac = if i0 == src_len - 1 { 0.0 } else { (s - i0 as f64) as f32 };
    (i0, i1, frac)
}

/// Separable Gaussian blur with replicated borders. `sigma <= 0` is a no-op.
pub fn gaussian_blur(image: &ImageTensor, sigma: f64) -> ImageTensor {
    if sigma <= 0.0 {
        return image.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f32> = kernel.iter().map(|k| (k / norm) as f32).collect();
    let (h, w) = image.dims();
    let src = &image.data;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let horiz = Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
        kernel
            .iter()
            .enumerate()
            .map(|(k, wk)| wk * src[[y, clamp(x as isize + k as isize - radius, w), c]])
            .sum::<f32>()
    });
    let data = Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
        kernel
            .iter()
            .enumerate()
            .map(|(k, wk)| wk * horiz[[clamp(y as isize + k as isize - radius, h), x, c]])
            .sum::<f32>()
    });
    ImageTensor { data }
}

/// Rec. 601 luma of an RGB triple.
pub fn luma(rgb: [f32; 3]) -> f64 {
    0.299 * rgb[0] as f64 + 0.587 * rgb[1] as f64 + 0.114 * rgb[2] as f64
}

// sRGB (D65) <-> CIELAB.

const WHITE_D65: [f64; 3] = [0.950_47, 1.0, 1.088_83];
const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.412_456_4, 0.357_576_1, 0.180_437_5],
    [0.212_672_9, 0.715_152_2, 0.072_175_0],
    [0.019_333_9, 0.119_192_0, 0.950_304_1],
];
const XYZ_TO_RGB: [[f64; 3]; 3] = [
    [3.240_454_2, -1.537_138_5, -0.498_531_4],
    [-0.969_266_0, 1.876_010_8, 0.041_556_0],
    [0.055_643_4, -0.204_025_9, 1.057_225_2],
];
const LAB_EPS: f64 = 216.0 / 24389.0;
const LAB_KAPPA: f64 = 24389.0 / 27.0;

fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn linear_to_srgb(c: f64) -> f64 {
    if c <= 0.003_130_8 {
        c * 12.92
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

fn lab_f(t: f64) -> f64 {
    if t > LAB_EPS {
        t.cbrt()
    } else {
        (LAB_KAPPA * t + 16.0) / 116.0
    }
}

fn lab_f_inv(f: f64) -> f64 {
    let t = f * f * f;
    if t > LAB_EPS {
        t
    } else {
        (116.0 * f - 16.0) / LAB_KAPPA
    }
}

pub fn rgb_to_lab_pixel(rgb: [f64; 3]) -> [f64; 3] {
    let lin = rgb.map(srgb_to_linear);
    let xyz: [f64; 3] = std::array::from_fn(|i| {
        RGB_TO_XYZ[i][0] * lin[0] + RGB_TO_XYZ[i][1] * lin[1] + RGB_TO_XYZ[i][2] * lin[2]
    });
    let f: [f64; 3] = std::array::from_fn(|i| lab_f(xyz[i] / WHITE_D65[i]));
    [116.0 * f[1] - 16.0, 500.0 * (f[0] - f[1]), 200.0 * (f[1] - f[2])]
}

pub fn lab_to_rgb_pixel(lab: [f64; 3]) -> [f64; 3] {
    let fy = (lab[0] + 16.0) / 116.0;
    let fx = fy + lab[1] / 500.0;
    let fz = fy - lab[2] / 200.0;
    let xyz = [
        lab_f_inv(fx) * WHITE_D65[0],
        lab_f_inv(fy) * WHITE_D65[1],
        lab_f_inv(fz) * WHITE_D65[2],
    ];
    std::array::from_fn(|i| {
        let lin = XYZ_TO_RGB[i][0] * xyz[0] + XYZ_TO_RGB[i][1] * xyz[1] + XYZ_TO_RGB[i][2] * xyz[2];
        linear_to_srgb(lin)
    })
}

/// CIELAB (D65) conversion of a whole image; channels are L, a, b.
pub fn to_lab(image: &ImageTensor) -> Array3<f64> {
    let (h, w) = image.dims();
    let mut out = Array3::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            let p = image.pixel(y, x).map(|v| v as f64);
            let lab = rgb_to_lab_pixel(p);
            for c in 0..3 {
                out[[y, x, c]] = lab[c];
            }
        }
    }
    out
}

/// Inverse of [`to_lab`]; out-of-gamut results are clipped to `[0, 1]`.
pub fn from_lab(lab: &Array3<f64>) -> Result<ImageTensor> {
    let (h, w, c) = lab.dim();
    if c != 3 {
        return Err(Error::shape("LAB array must have 3 channels"));
    }
    let mut out = Array3::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            let rgb = lab_to_rgb_pixel([lab[[y, x, 0]], lab[[y, x, 1]], lab[[y, x, 2]]]);
            for c in 0..3 {
                out[[y, x, c]] = rgb[c].clamp(0.0, 1.0) as f32;
            }
        }
    }
    ImageTensor::new(out)
}
