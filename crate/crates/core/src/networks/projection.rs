//! Per-layer projection heads and patch-location sampling for the
//! contrastive losses.

use std::collections::BTreeMap;

use candle_core::{Device, Tensor};
use rand::seq::index::sample;
use rand::Rng;

use super::params::{Linear, ParamStore};
use super::{FeatureStack, LayerEmbeddings};
use crate::error::{Error, Result};
use crate::imaging::ShadowMask;

/// Two-hidden-layer MLP per tap layer, L2-normalized output.
#[derive(Clone, Debug)]
pub struct ProjectionHead {
    mlps: BTreeMap<usize, [Linear; 3]>,
    params: ParamStore,
}

impl ProjectionHead {
    /// `layer_channels`: tap id → channel count.
    pub fn new<R: Rng + ?Sized>(
        layer_channels: &BTreeMap<usize, usize>,
        hidden: usize,
        out_dim: usize,
        rng: &mut R,
        device: &Device,
    ) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut mlps = BTreeMap::new();
        for (&layer, &c) in layer_channels {
            let l0 = store.linear(&format!("l{layer}.fc0"), c, hidden, rng, device)?;
            let l1 = store.linear(&format!("l{layer}.fc1"), hidden, hidden, rng, device)?;
            let l2 = store.linear(&format!("l{layer}.fc2"), hidden, out_dim, rng, device)?;
            mlps.insert(layer, [l0, l1, l2]);
        }
        Ok(Self { mlps, params: store })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn layers(&self) -> impl Iterator<Item = usize> + '_ {
        self.mlps.keys().copied()
    }

    /// Gathers features at `locations` (flat `y*W + x` indices per layer) and
    /// projects them to unit-norm embeddings, one `N_l × dim` tensor per layer.
    pub fn project(&self, feats: &FeatureStack, locations: &Locations) -> Result<LayerEmbeddings> {
        let mut out = BTreeMap::new();
        for (&layer, idx) in &locations.0 {
            let mlp = self
                .mlps
                .get(&layer)
                .ok_or_else(|| Error::contract(format!("no projection head for layer {layer}")))?;
            let f = feats
                .get(layer)
                .ok_or_else(|| Error::contract(format!("feature stack lacks layer {layer}")))?;
            let (_, c, h, w) = f.dims4()?;
            if let Some(bad) = idx.iter().find(|&&i| i as usize >= h * w) {
                return Err(Error::contract(format!(
                    "location {bad} out of range for layer {layer} ({h}x{w})"
                )));
            }
            let index = Tensor::new(idx.as_slice(), f.device())?;
            let picked = f.reshape((c, h * w))?.index_select(&index, 1)?.t()?;
            let z = mlp[0].forward(&picked)?.relu()?;
            let z = mlp[1].forward(&z)?.relu()?;
            let z = mlp[2].forward(&z)?;
            out.insert(layer, l2_normalize(&z)?);
        }
        Ok(LayerEmbeddings(out))
    }
}

pub fn l2_normalize(z: &Tensor) -> Result<Tensor> {
    let norm = (z.sqr()?.sum_keepdim(1)? + 1e-12)?.sqrt()?;
    Ok(z.broadcast_div(&norm)?)
}

/// Sampled patch positions per tap layer, shared across the query, positive
/// and negative stacks.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Locations(pub BTreeMap<usize, Vec<u32>>);

impl Locations {
    /// Draws up to `count` distinct positions per layer. With a mask, only
    /// cells whose footprint touches the support are eligible (all cells when
    /// none do).
    pub fn sample<R: Rng + ?Sized>(
        feats: &FeatureStack,
        support: Option<&ShadowMask>,
        count: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut out = BTreeMap::new();
        for (layer, f) in feats.iter() {
            let (_, _, h, w) = f.dims4()?;
            let mut eligible: Vec<u32> = match support {
                Some(mask) => cells_touching(mask, h, w),
                None => Vec::new(),
            };
            if eligible.is_empty() {
                eligible = (0..(h * w) as u32).collect();
            }
            let n = count.min(eligible.len());
            let picks = sample(rng, eligible.len(), n).into_iter().map(|i| eligible[i]).collect();
            out.insert(layer, picks);
        }
        Ok(Self(out))
    }
}

fn cells_touching(mask: &ShadowMask, h: usize, w: usize) -> Vec<u32> {
    let (mh, mw) = mask.dims();
    let mut out = Vec::new();
    for cy in 0..h {
        let (y0, y1) = (cy * mh / h, ((cy + 1) * mh).div_ceil(h).min(mh));
        for cx in 0..w {
            let (x0, x1) = (cx * mw / w, ((cx + 1) * mw).div_ceil(w).min(mw));
            let hit = (y0..y1).any(|y| (x0..x1).any(|x| mask.get(y, x)));
            if hit {
                out.push((cy * w + cx) as u32);
            }
        }
    }
    out
}
