//! Triplet datasets (ISTD, ISTD+, SRD), deterministic enumeration and
//! non-shadow crop sampling.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;
use std::thread::JoinHandle;

use ndarray::s;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::imaging::{check_dims, ImageTensor, RegionTensor, ShadowMask};
use crate::io;

pub mod synthetic;

/// Largest shadow fraction a window may contain and still count as non-shadow.
pub const NON_SHADOW_TOLERANCE: f64 = 0.05;
pub const CROP_ATTEMPTS: usize = 100;

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "bmp", "tif", "tiff"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    Istd,
    #[serde(rename = "istd+")]
    IstdPlus,
    Srd,
}

impl FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "istd" => Ok(Layout::Istd),
            "istd+" | "istd_plus" | "istdplus" => Ok(Layout::IstdPlus),
            "srd" => Ok(Layout::Srd),
            other => Err(Error::config("dataset.layout", format!("unknown layout `{other}`"))),
        }
    }
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Layout::Istd => "istd",
            Layout::IstdPlus => "istd+",
            Layout::Srd => "srd",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Test,
}

impl SplitName {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Test => "test",
        }
    }
}

impl FromStr for SplitName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "test" => Ok(SplitName::Test),
            other => Err(Error::config("dataset.split", format!("unknown split `{other}`"))),
        }
    }
}

/// Shadow image, its mask and (when available) the shadow-free ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct ShadowTriplet {
    pub id: String,
    pub shadow: ImageTensor,
    pub mask: ShadowMask,
    pub shadow_free: Option<ImageTensor>,
}

impl ShadowTriplet {
    pub fn new(
        id: impl Into<String>,
        shadow: ImageTensor,
        mask: ShadowMask,
        shadow_free: Option<ImageTensor>,
    ) -> Result<Self> {
        check_dims(shadow.dims(), mask.dims(), "triplet mask")?;
        if let Some(g) = &shadow_free {
            check_dims(shadow.dims(), g.dims(), "triplet shadow-free image")?;
        }
        Ok(Self {
            id: id.into(),
            shadow,
            mask,
            shadow_free,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.shadow.dims()
    }
}

#[derive(Clone, Debug)]
enum Source {
    Files {
        shadow: PathBuf,
        mask: PathBuf,
        shadow_free: Option<PathBuf>,
    },
    Memory(Box<ShadowTriplet>),
}

#[derive(Clone, Debug)]
pub struct SampleEntry {
    pub id: String,
    source: Source,
}

impl SampleEntry {
    pub fn has_ground_truth(&self) -> bool {
        match &self.source {
            Source::Files { shadow_free, .. } => shadow_free.is_some(),
            Source::Memory(t) => t.shadow_free.is_some(),
        }
    }

    fn decode(&self) -> Result<ShadowTriplet> {
        match &self.source {
            Source::Files {
                shadow,
                mask,
                shadow_free,
            } => {
                let s = io::load_image(shadow)?;
                let m = io::load_mask(mask)?;
                let g = shadow_free.as_deref().map(io::load_image).transpose()?;
                ShadowTriplet::new(self.id.clone(), s, m, g)
            }
            Source::Memory(t) => Ok((**t).clone()),
        }
    }
}

/// An ordered, lazily decoded list of triplets.
#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub name: SplitName,
    pub layout: Layout,
    samples: Vec<SampleEntry>,
    /// Stems that were skipped while loading, with the reason.
    pub rejected: Vec<(String, String)>,
}

impl DatasetSplit {
    /// In-memory split; ids must be unique.
    pub fn from_triplets(name: SplitName, layout: Layout, triplets: Vec<ShadowTriplet>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for t in &triplets {
            if !seen.insert(t.id.clone()) {
                return Err(Error::contract(format!("duplicate sample id `{}`", t.id)));
            }
        }
        Ok(Self {
            name,
            layout,
            samples: triplets
                .into_iter()
                .map(|t| SampleEntry {
                    id: t.id.clone(),
                    source: Source::Memory(Box::new(t)),
                })
                .collect(),
            rejected: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.samples.iter().map(|s| s.id.as_str())
    }

    pub fn entries(&self) -> &[SampleEntry] {
        &self.samples
    }

    pub fn get(&self, index: usize) -> Result<ShadowTriplet> {
        self.samples
            .get(index)
            .ok_or_else(|| Error::contract(format!("sample index {index} out of range ({})", self.len())))?
            .decode()
    }

    /// Yields triplets in exactly the given order, decoding each on demand.
    pub fn iterate<'a>(&'a self, order: &'a [usize]) -> Result<impl Iterator<Item = Result<ShadowTriplet>> + 'a> {
        self.check_order(order)?;
        Ok(order.iter().map(move |&i| self.samples[i].decode()))
    }

    /// Like [`DatasetSplit::iterate`] but decodes ahead on a background thread
    /// through a bounded queue. Delivery order is the requested order.
    pub fn iterate_prefetched(self: &Arc<Self>, order: Vec<usize>, depth: usize) -> Result<Prefetcher> {
        self.check_order(&order)?;
        let (tx, rx) = sync_channel(depth.max(1));
        let split = Arc::clone(self);
        let handle = std::thread::spawn(move || {
            for i in order {
                if tx.send(split.samples[i].decode()).is_err() {
                    break;
                }
            }
        });
        Ok(Prefetcher {
            rx,
            handle: Some(handle),
        })
    }

    fn check_order(&self, order: &[usize]) -> Result<()> {
        if let Some(bad) = order.iter().find(|&&i| i >= self.len()) {
            return Err(Error::contract(format!(
                "order index {bad} out of range for split of {}",
                self.len()
            )));
        }
        Ok(())
    }

    /// SHA-256 over ids and source bytes, in split order.
    pub fn fingerprint(&self) -> Result<String> {
        let mut hasher = Sha256::new();
        for s in &self.samples {
            hasher.update(s.id.as_bytes());
            match &s.source {
                Source::Files {
                    shadow,
                    mask,
                    shadow_free,
                } => {
                    for p in [Some(shadow), Some(mask), shadow_free.as_ref()].into_iter().flatten() {
                        hasher.update(fs::read(p)?);
                    }
                }
                Source::Memory(t) => {
                    for v in t.shadow.data().iter() {
                        hasher.update(v.to_le_bytes());
                    }
                }
            }
        }
        Ok(format!("{:x}", hasher.finalize()))
    }

    /// Writes one rejected stem per line, followed by the reason.
    pub fn write_rejection_report(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (stem, reason) in &self.rejected {
            out.push_str(&format!("{stem}\t{reason}\n"));
        }
        fs::write(path, out)?;
        Ok(())
    }
}

pub struct Prefetcher {
    rx: Receiver<Result<ShadowTriplet>>,
    handle: Option<JoinHandle<()>>,
}

impl Iterator for Prefetcher {
    type Item = Result<ShadowTriplet>;

    fn next(&mut self) -> Option<Self::Item> {
        match self.rx.recv() {
            Ok(item) => Some(item),
            Err(_) => {
                if let Some(h) = self.handle.take() {
                    let _ = h.join();
                }
                None
            }
        }
    }
}

/// Sub-directory names for (shadow, mask, shadow-free).
fn layout_dirs(layout: Layout, name: SplitName) -> [String; 3] {
    let n = name.as_str();
    match layout {
        Layout::Istd | Layout::IstdPlus => [format!("{n}_A"), format!("{n}_B"), format!("{n}_C")],
        Layout::Srd => ["shadow".into(), "mask".into(), "shadow_free".into()],
    }
}

/// Directory holding the split's sub-folders: `root/<split>/` if it exists,
/// otherwise `root/` itself.
fn split_base(root: &Path, layout: Layout, name: SplitName) -> PathBuf {
    let nested = root.join(name.as_str());
    let [shadow_dir, ..] = layout_dirs(layout, name);
    if nested.join(&shadow_dir).is_dir() {
        nested
    } else {
        root.to_path_buf()
    }
}

fn list_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if !path.is_file() || !ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_string(), path.clone());
        }
    }
    Ok(out)
}

/// Scans a dataset split on disk. Samples are ordered lexicographically by stem.
pub fn load_split(root: &Path, layout: Layout, name: SplitName, require_gt: bool) -> Result<DatasetSplit> {
    if !root.is_dir() {
        return Err(Error::Layout {
            path: root.to_path_buf(),
            reason: "dataset root does not exist".into(),
        });
    }
    let base = split_base(root, layout, name);
    let [shadow_dir, mask_dir, gt_dir] = layout_dirs(layout, name).map(|d| base.join(d));
    // A completely empty root is a vacuous split rather than a layout error.
    if fs::read_dir(root)?.next().is_none() {
        log::warn!("dataset root {} is empty", root.display());
        return Ok(DatasetSplit {
            name,
            layout,
            samples: Vec::new(),
            rejected: Vec::new(),
        });
    }
    for dir in [&shadow_dir, &mask_dir] {
        if !dir.is_dir() {
            return Err(Error::Layout {
                path: dir.clone(),
                reason: format!("missing {layout} sub-directory"),
            });
        }
    }
    if require_gt && !gt_dir.is_dir() {
        return Err(Error::Layout {
            path: gt_dir,
            reason: "shadow-free directory required but missing".into(),
        });
    }

    let shadows = list_stems(&shadow_dir)?;
    let masks = list_stems(&mask_dir)?;
    let gts = if gt_dir.is_dir() { list_stems(&gt_dir)? } else { BTreeMap::new() };

    let mut samples = Vec::new();
    let mut rejected = Vec::new();
    for (stem, shadow) in shadows {
        let Some(mask) = masks.get(&stem) else {
            rejected.push((stem, "no matching mask".to_string()));
            continue;
        };
        let shadow_free = gts.get(&stem).cloned();
        if require_gt && shadow_free.is_none() {
            return Err(Error::contract(format!("sample `{stem}` has no shadow-free image")));
        }
        samples.push(SampleEntry {
            id: stem,
            source: Source::Files {
                shadow,
                mask: mask.clone(),
                shadow_free,
            },
        });
    }
    if samples.is_empty() {
        log::warn!("no samples found under {}", base.display());
    }
    if !rejected.is_empty() {
        log::warn!("{} shadow images skipped without a mask", rejected.len());
    }
    Ok(DatasetSplit {
        name,
        layout,
        samples,
        rejected,
    })
}

/// Cuts a window whose shadow fraction is below [`NON_SHADOW_TOLERANCE`].
///
/// The returned region has the window's dimensions; its mask is the window's
/// non-shadow footprint.
pub fn sample_nonshadow_crop<R: Rng + ?Sized>(
    triplet: &ShadowTriplet,
    crop_hw: (usize, usize),
    rng: &mut R,
) -> Result<RegionTensor> {
    let (ch, cw) = crop_hw;
    let (h, w) = triplet.dims();
    if ch == 0 || cw == 0 || ch > h || cw > w {
        return Err(Error::contract(format!(
            "crop {ch}x{cw} does not fit image {h}x{w}"
        )));
    }
    let (y0, x0) = find_nonshadow_window(&triplet.mask, (ch, cw), rng)?;
    let footprint = triplet.mask.crop(y0, x0, ch, cw).inverted();
    let data = triplet
        .shadow
        .data()
        .slice(s![y0..y0 + ch, x0..x0 + cw, ..])
        .to_owned();
    RegionTensor::masked(data, footprint)
}

/// Top-left corner of a random window with shadow fraction below tolerance.
pub(crate) fn find_nonshadow_window<R: Rng + ?Sized>(
    mask: &ShadowMask,
    (ch, cw): (usize, usize),
    rng: &mut R,
) -> Result<(usize, usize)> {
    let (h, w) = mask.dims();
    let limit = NON_SHADOW_TOLERANCE * (ch * cw) as f64;
    for _ in 0..CROP_ATTEMPTS {
        let y0 = rng.random_range(0..=h - ch);
        let x0 = rng.random_range(0..=w - cw);
        let shadow = mask
            .data()
            .slice(s![y0..y0 + ch, x0..x0 + cw])
            .iter()
            .filter(|v| **v)
            .count();
        if (shadow as f64) < limit {
            return Ok((y0, x0));
        }
    }
    Err(Error::SamplingExhausted {
        attempts: CROP_ATTEMPTS,
    })
}
