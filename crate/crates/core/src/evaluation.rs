//! Region-wise image quality metrics and dataset scoring.
//!
//! "RMSE" in LAB follows the shadow-removal convention: the mean absolute
//! per-channel LAB difference over the region's pixels. The literal
//! root-mean-square is available through [`LabError::Rms`].

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::datasets::{DatasetSplit, ShadowTriplet};
use crate::error::{Error, Result};
use crate::imaging::{resize, to_lab, ImageTensor, ShadowMask};
use crate::networks::Networks;

pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabError {
    Mae,
    Rms,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    PerSample,
    PixelPooled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Square side both images are resized to before scoring (0 = native).
    pub resize: usize,
    pub aggregation: Aggregation,
    pub lab_error: LabError,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            resize: 256,
            aggregation: Aggregation::PerSample,
            lab_error: LabError::Mae,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        match self.resize {
            r if r != 0 && r < SSIM_WINDOW => Err(Error::config(
                "eval.resize",
                format!("must be at least the {SSIM_WINDOW}px SSIM window"),
            )),
            _ => Ok(()),
        }
    }
}

/// A metric over the shadow pixels, the non-shadow pixels and the frame.
/// Empty regions are absent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Regions {
    pub shadow: Option<f64>,
    pub non_shadow: Option<f64>,
    pub all: Option<f64>,
}

impl Regions {
    fn get(&self, r: Region) -> Option<f64> {
        match r {
            Region::Shadow => self.shadow,
            Region::NonShadow => self.non_shadow,
            Region::All => self.all,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Region {
    Shadow,
    NonShadow,
    All,
}

const REGIONS: [Region; 3] = [Region::Shadow, Region::NonShadow, Region::All];

impl Region {
    fn contains(self, in_shadow: bool) -> bool {
        match self {
            Region::Shadow => in_shadow,
            Region::NonShadow => !in_shadow,
            Region::All => true,
        }
    }

    fn label(self) -> &'static str {
        match self {
            Region::Shadow => "shadow",
            Region::NonShadow => "non_shadow",
            Region::All => "all",
        }
    }
}

/// Per-region sums needed for pixel-pooled aggregation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RegionSums {
    pub pixels: u64,
    pub lab_abs: f64,
    pub lab_sq: f64,
    pub rgb_sq: f64,
    /// SSIM-map entries whose window centre lies in the region.
    pub ssim_windows: u64,
    pub ssim: f64,
}

impl RegionSums {
    fn merge(&mut self, o: &RegionSums) {
        self.pixels += o.pixels;
        self.lab_abs += o.lab_abs;
        self.lab_sq += o.lab_sq;
        self.rgb_sq += o.rgb_sq;
        self.ssim_windows += o.ssim_windows;
        self.ssim += o.ssim;
    }

    fn lab(&self, kind: LabError) -> Option<f64> {
        let n = (self.pixels * 3) as f64;
        (self.pixels > 0).then(|| match kind {
            LabError::Mae => self.lab_abs / n,
            LabError::Rms => (self.lab_sq / n).sqrt(),
        })
    }

    fn psnr(&self) -> Option<f64> {
        (self.pixels > 0).then(|| psnr_from_mse(self.rgb_sq / (self.pixels * 3) as f64))
    }

    fn ssim(&self) -> Option<f64> {
        (self.ssim_windows > 0).then(|| self.ssim / self.ssim_windows as f64)
    }
}

fn check_dims(pred: &ImageTensor, gt: &ImageTensor, mask: Option<&ShadowMask>) -> Result<()> {
    if pred.dims() != gt.dims() {
        return Err(Error::contract(format!(
            "prediction {:?} and ground truth {:?} differ in size",
            pred.dims(),
            gt.dims()
        )));
    }
    if let Some(m) = mask {
        if m.dims() != gt.dims() {
            return Err(Error::contract(format!("mask {:?} does not match image {:?}", m.dims(), gt.dims())));
        }
    }
    Ok(())
}

fn lab_sums(pred: &ImageTensor, gt: &ImageTensor, mask: &ShadowMask) -> [RegionSums; 3] {
    let (lp, lg) = (to_lab(pred), to_lab(gt));
    let mut out = [RegionSums::default(); 3];
    let (h, w) = gt.dims();
    for y in 0..h {
        for x in 0..w {
            let s = mask.get(y, x);
            let (mut abs, mut sq, mut rgb) = (0.0, 0.0, 0.0);
            let (p, g) = (pred.pixel(y, x), gt.pixel(y, x));
            for c in 0..3 {
                let d = lp[[y, x, c]] - lg[[y, x, c]];
                abs += d.abs();
                sq += d * d;
                let e = p[c] as f64 - g[c] as f64;
                rgb += e * e;
            }
            for (i, r) in REGIONS.iter().enumerate() {
                if r.contains(s) {
                    out[i].pixels += 1;
                    out[i].lab_abs += abs;
                    out[i].lab_sq += sq;
                    out[i].rgb_sq += rgb;
                }
            }
        }
    }
    out
}

/// LAB error per region with the chosen reduction.
pub fn region_lab_error(pred: &ImageTensor, gt: &ImageTensor, mask: &ShadowMask, kind: LabError) -> Result<Regions> {
    check_dims(pred, gt, Some(mask))?;
    let [s, n, a] = lab_sums(pred, gt, mask);
    Ok(Regions {
        shadow: s.lab(kind),
        non_shadow: n.lab(kind),
        all: a.lab(kind),
    })
}

/// Mean absolute per-channel LAB difference per region.
pub fn region_rmse_lab(pred: &ImageTensor, gt: &ImageTensor, mask: &ShadowMask) -> Result<Regions> {
    region_lab_error(pred, gt, mask, LabError::Mae)
}

fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

/// RGB PSNR with peak 1, capped at [`PSNR_CAP`].
pub fn psnr(pred: &ImageTensor, gt: &ImageTensor) -> Result<f64> {
    check_dims(pred, gt, None)?;
    let n = pred.data().len() as f64;
    let mse = pred
        .data()
        .iter()
        .zip(gt.data().iter())
        .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
        .sum::<f64>()
        / n;
    Ok(psnr_from_mse(mse))
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let k: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of one plane.
fn filter_valid(plane: &Array2<f64>, k: &[f64]) -> Array2<f64> {
    let (h, w) = plane.dim();
    let n = k.len();
    let horiz = Array2::from_shape_fn((h, w - n + 1), |(y, x)| (0..n).map(|i| k[i] * plane[[y, x + i]]).sum::<f64>());
    Array2::from_shape_fn((h - n + 1, w - n + 1), |(y, x)| (0..n).map(|i| k[i] * horiz[[y + i, x]]).sum::<f64>())
}

/// SSIM map averaged over channels; entry `(y, x)` is the window centred on
/// pixel `(y + 5, x + 5)`.
pub fn ssim_map(pred: &ImageTensor, gt: &ImageTensor) -> Result<Array2<f64>> {
    check_dims(pred, gt, None)?;
    let (h, w) = gt.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::contract(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images, got {h}x{w}"
        )));
    }
    let k = gaussian_window();
    let plane = |img: &ImageTensor, c: usize| img.data().index_axis(Axis(2), c).mapv(|v| v as f64);
    let mut acc = Array2::<f64>::zeros((h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1));
    for c in 0..3 {
        let (x, y) = (plane(pred, c), plane(gt, c));
        let mx = filter_valid(&x, &k);
        let my = filter_valid(&y, &k);
        let sxx = filter_valid(&(&x * &x), &k) - &mx * &mx;
        let syy = filter_valid(&(&y * &y), &k) - &my * &my;
        let sxy = filter_valid(&(&x * &y), &k) - &mx * &my;
        let num = (&mx * &my * 2.0 + SSIM_C1) * (sxy * 2.0 + SSIM_C2);
        let den = (&mx * &mx + &my * &my + SSIM_C1) * (sxx + syy + SSIM_C2);
        acc += &(num / den);
    }
    Ok(acc / 3.0)
}

/// Single-scale SSIM (11×11 Gaussian window, σ 1.5), mean over channels.
pub fn ssim(pred: &ImageTensor, gt: &ImageTensor) -> Result<f64> {
    let m = ssim_map(pred, gt)?;
    Ok(m.mean().expect("non-empty map"))
}

fn ssim_sums(map: &Array2<f64>, mask: &ShadowMask) -> [(u64, f64); 3] {
    let off = SSIM_WINDOW / 2;
    let mut out = [(0u64, 0.0f64); 3];
    for ((y, x), v) in map.indexed_iter() {
        let s = mask.get(y + off, x + off);
        for (i, r) in REGIONS.iter().enumerate() {
            if r.contains(s) {
                out[i].0 += 1;
                out[i].1 += v;
            }
        }
    }
    out
}

/// Scores of one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    pub lab: Regions,
    pub psnr: Regions,
    pub ssim: Regions,
    pub sums: [RegionSums; 3],
}

/// Scores `pred` against `gt` after the configured resize. The prediction is
/// clipped to `[0, 1]` first.
pub fn score_sample(
    id: &str,
    pred: &ImageTensor,
    gt: &ImageTensor,
    mask: &ShadowMask,
    cfg: &EvalConfig,
) -> Result<SampleMetrics> {
    check_dims(pred, gt, Some(mask))?;
    let pred = pred.clone().clipped();
    let (pred, gt, mask) = match cfg.resize {
        side if side != 0 && gt.dims() != (side, side) => (
            resize(&pred, side, side)?,
            resize(gt, side, side)?,
            mask.resize_nearest(side, side)?,
        ),
        _ => (pred, gt.clone(), mask.clone()),
    };
    let mut sums = lab_sums(&pred, &gt, &mask);
    let map = ssim_map(&pred, &gt)?;
    for (s, (n, v)) in sums.iter_mut().zip(ssim_sums(&map, &mask)) {
        s.ssim_windows = n;
        s.ssim = v;
    }
    let pick = |f: &dyn Fn(&RegionSums) -> Option<f64>| Regions {
        shadow: f(&sums[0]),
        non_shadow: f(&sums[1]),
        all: f(&sums[2]),
    };
    Ok(SampleMetrics {
        id: id.to_string(),
        lab: pick(&|s| s.lab(cfg.lab_error)),
        psnr: pick(&|s| s.psnr()),
        ssim: pick(&|s| s.ssim()),
        sums,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionMetrics {
    pub rmse_lab: Option<f64>,
    pub psnr_rgb: Option<f64>,
    pub ssim_rgb: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub shadow: RegionMetrics,
    pub non_shadow: RegionMetrics,
    pub all: RegionMetrics,
}

impl Summary {
    fn region(&self, r: Region) -> &RegionMetrics {
        match r {
            Region::Shadow => &self.shadow,
            Region::NonShadow => &self.non_shadow,
            Region::All => &self.all,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config: EvalConfig,
    pub count: usize,
    /// Headline numbers under `config.aggregation`.
    pub summary: Summary,
    pub per_sample_mean: Summary,
    pub pixel_pooled: Summary,
    pub samples: Vec<SampleMetrics>,
}

/// Accumulates sample scores; merging is associative.
#[derive(Clone, Debug, Default)]
pub struct ReportBuilder {
    samples: Vec<SampleMetrics>,
}

impl ReportBuilder {
    pub fn push(&mut self, s: SampleMetrics) {
        self.samples.push(s);
    }

    pub fn merge(&mut self, other: ReportBuilder) {
        self.samples.extend(other.samples);
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn finish(self, cfg: &EvalConfig) -> Result<MetricsReport> {
        if self.samples.is_empty() {
            return Err(Error::contract("no usable samples to evaluate"));
        }
        let mean = |get: &dyn Fn(&SampleMetrics) -> Option<f64>| {
            let v: Vec<f64> = self.samples.iter().filter_map(get).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        let per_region_mean = |r: Region| RegionMetrics {
            rmse_lab: mean(&|s| s.lab.get(r)),
            psnr_rgb: mean(&|s| s.psnr.get(r)),
            ssim_rgb: mean(&|s| s.ssim.get(r)),
        };
        let pooled_region = |i: usize| {
            let mut acc = RegionSums::default();
            for s in &self.samples {
                acc.merge(&s.sums[i]);
            }
            RegionMetrics {
                rmse_lab: acc.lab(cfg.lab_error),
                psnr_rgb: acc.psnr(),
                ssim_rgb: acc.ssim(),
            }
        };
        let per_sample_mean = Summary {
            shadow: per_region_mean(Region::Shadow),
            non_shadow: per_region_mean(Region::NonShadow),
            all: per_region_mean(Region::All),
        };
        let pixel_pooled = Summary {
            shadow: pooled_region(0),
            non_shadow: pooled_region(1),
            all: pooled_region(2),
        };
        let summary = match cfg.aggregation {
            Aggregation::PerSample => per_sample_mean,
            Aggregation::PixelPooled => pixel_pooled,
        };
        Ok(MetricsReport {
            config: cfg.clone(),
            count: self.samples.len(),
            summary,
            per_sample_mean,
            pixel_pooled,
            samples: self.samples,
        })
    }
}

/// Anything that produces a shadow-free estimate for a triplet.
pub trait ShadowRemover {
    fn remove(&self, triplet: &ShadowTriplet) -> Result<ImageTensor>;
}

/// Region extraction, DeShadower, embedding and (unless bypassed) refinement.
pub struct PipelineRemover<'a> {
    pub networks: &'a Networks,
    pub bypass_refine: bool,
}

impl ShadowRemover for PipelineRemover<'_> {
    fn remove(&self, t: &ShadowTriplet) -> Result<ImageTensor> {
        Ok(self.networks.remove_shadow(&t.shadow, &t.mask, self.bypass_refine)?.output)
    }
}

/// Returns the ground truth itself; used for the metric self-test.
pub struct GroundTruthEcho;

impl ShadowRemover for GroundTruthEcho {
    fn remove(&self, t: &ShadowTriplet) -> Result<ImageTensor> {
        t.shadow_free
            .clone()
            .ok_or_else(|| Error::contract(format!("sample `{}` has no ground truth", t.id)))
    }
}

/// Returns the shadow input unchanged.
pub struct Passthrough;

impl ShadowRemover for Passthrough {
    fn remove(&self, t: &ShadowTriplet) -> Result<ImageTensor> {
        Ok(t.shadow.clone())
    }
}

/// Scores a sequence of triplets; samples without ground truth are skipped.
pub fn evaluate_triplets<I>(remover: &dyn ShadowRemover, triplets: I, cfg: &EvalConfig) -> Result<MetricsReport>
where
    I: IntoIterator<Item = Result<ShadowTriplet>>,
{
    cfg.validate()?;
    let mut builder = ReportBuilder::default();
    for t in triplets {
        let t = t?;
        let Some(gt) = &t.shadow_free else {
            log::warn!("skipping `{}`: no shadow-free ground truth", t.id);
            continue;
        };
        let pred = remover.remove(&t)?;
        builder.push(score_sample(&t.id, &pred, gt, &t.mask, cfg)?);
    }
    builder.finish(cfg)
}

pub fn evaluate(remover: &dyn ShadowRemover, split: &DatasetSplit, cfg: &EvalConfig) -> Result<MetricsReport> {
    let order: Vec<usize> = (0..split.len()).collect();
    let report = evaluate_triplets(remover, split.iterate(&order)?, cfg);
    report
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

const CSV_HEADER: &str = "id,lab_shadow,lab_non_shadow,lab_all,psnr_shadow,psnr_non_shadow,psnr_all,ssim_shadow,ssim_non_shadow,ssim_all";

fn csv_line(id: &str, s: &Summary) -> String {
    let mut cells = vec![id.to_string()];
    for get in [
        |m: &RegionMetrics| m.rmse_lab,
        |m: &RegionMetrics| m.psnr_rgb,
        |m: &RegionMetrics| m.ssim_rgb,
    ] {
        for r in REGIONS {
            cells.push(cell(get(s.region(r))));
        }
    }
    cells.join(",")
}

impl MetricsReport {
    /// One row per sample, then `mean` and `pooled` rows.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{CSV_HEADER}\n");
        for s in &self.samples {
            let as_summary = Summary {
                shadow: RegionMetrics {
                    rmse_lab: s.lab.shadow,
                    psnr_rgb: s.psnr.shadow,
                    ssim_rgb: s.ssim.shadow,
                },
                non_shadow: RegionMetrics {
                    rmse_lab: s.lab.non_shadow,
                    psnr_rgb: s.psnr.non_shadow,
                    ssim_rgb: s.ssim.non_shadow,
                },
                all: RegionMetrics {
                    rmse_lab: s.lab.all,
                    psnr_rgb: s.psnr.all,
                    ssim_rgb: s.ssim.all,
                },
            };
            out.push_str(&csv_line(&s.id, &as_summary));
            out.push('\n');
        }
        out.push_str(&csv_line("mean", &self.per_sample_mean));
        out.push('\n');
        out.push_str(&csv_line("pooled", &self.pixel_pooled));
        out.push('\n');
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_csv())?)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, serde_json::to_string_pretty(self)?)?)
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    /// Shadow / Non-Shadow / All table of the headline numbers.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let agg = match self.config.aggregation {
            Aggregation::PerSample => "per-sample mean",
            Aggregation::PixelPooled => "pixel-pooled",
        };
        let lab = match self.config.lab_error {
            LabError::Mae => "LAB MAE",
            LabError::Rms => "LAB RMS",
        };
        let _ = writeln!(out, "{} samples, {agg}", self.count);
        let _ = writeln!(out, "{:<8} {:>12} {:>12} {:>12}", "", "Shadow", "Non-Shadow", "All");
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into());
        for (name, get) in [
            (lab, (|m: &RegionMetrics| m.rmse_lab) as fn(&RegionMetrics) -> Option<f64>),
            ("PSNR", |m: &RegionMetrics| m.psnr_rgb),
            ("SSIM", |m: &RegionMetrics| m.ssim_rgb),
        ] {
            let _ = write!(out, "{name:<8}");
            for r in REGIONS {
                let _ = write!(out, " {:>12}", fmt(get(self.summary.region(r))));
            }
            out.push('\n');
        }
        out
    }

    /// Region label → headline LAB error, for quick lookups.
    pub fn lab(&self, region: &str) -> Option<f64> {
        REGIONS
            .iter()
            .find(|r| r.label() == region)
            .and_then(|r| self.summary.region(*r).rmse_lab)
    }
}
