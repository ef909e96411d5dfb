//! Weakly- and fully-supervised training loops, the learning-rate schedule,
//! curriculum ordering and resumable run state.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augmentation::{
    bank_from_masks, brightness_variants, curriculum_score, illumination_variants, inpaint_shadow,
    refinement_positive, standard_augment, AugmentationConfig, MaskBank,
};
use crate::datasets::{sample_nonshadow_crop, DatasetSplit, ShadowTriplet};
use crate::error::{Error, Result};
use crate::imaging::{extract_region, resize, ImageTensor, RegionTensor};
use crate::losses::{self, LossWeights};
use crate::networks::{checkpoint, Locations, NetworkConfig, Networks, PerceptualExtractor};
use crate::optim::Sgd;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Weak,
    Supervised,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Weak => "weak",
            Mode::Supervised => "supervised",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "weak" => Ok(Mode::Weak),
            "supervised" | "sup" => Ok(Mode::Supervised),
            other => Err(Error::config("train.mode", format!("unknown mode `{other}`"))),
        }
    }
}

/// Weights of the loss terms outside the supervised triple.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TermWeights {
    pub nce: f64,
    pub identity: f64,
    pub critic_distill: f64,
    pub adversarial: f64,
    pub illumination: f64,
    pub refine_nce: f64,
    pub perceptual: f64,
}

impl Default for TermWeights {
    fn default() -> Self {
        Self {
            nce: 1.0,
            identity: 1.0,
            critic_distill: 1.0,
            adversarial: 1.0,
            illumination: 1.0,
            refine_nce: 1.0,
            perceptual: 1.0,
        }
    }
}

impl TermWeights {
    fn validate(&self) -> Result<()> {
        let all = [
            ("nce", self.nce),
            ("identity", self.identity),
            ("critic_distill", self.critic_distill),
            ("adversarial", self.adversarial),
            ("illumination", self.illumination),
            ("refine_nce", self.refine_nce),
            ("perceptual", self.perceptual),
        ];
        for (k, v) in all {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(format!("train.loss_weights.{k}"), "must be finite and >= 0"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub epochs: usize,
    pub lr_base: f64,
    pub decay_start_epoch: usize,
    pub momentum: f64,
    pub batch_size: usize,
    pub train_resolution: usize,
    pub seed: u64,
    pub loss_weights: TermWeights,
    pub supervised_weights: LossWeights,
    /// Brightness level family for the supervised contrastive positives.
    pub supervised_mu: f64,
    pub tau: f64,
    /// Side of the non-shadow crops fed to the critic and the identity loss.
    pub crop_size: usize,
    pub curriculum: bool,
    pub inpaint: bool,
    pub augment: bool,
    pub checkpoint_every: usize,
    pub prefetch: usize,
    /// Hard cap on optimizer steps (unset = run all epochs).
    pub max_steps: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Weak,
            epochs: 200,
            lr_base: 1e-4,
            decay_start_epoch: 75,
            momentum: 0.9,
            batch_size: 1,
            train_resolution: 256,
            seed: 0,
            loss_weights: TermWeights::default(),
            supervised_weights: LossWeights::default(),
            supervised_mu: 0.0,
            tau: losses::DEFAULT_TAU,
            crop_size: 128,
            curriculum: true,
            inpaint: true,
            augment: true,
            checkpoint_every: 10,
            prefetch: 2,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be positive"));
        }
        if self.decay_start_epoch >= self.epochs {
            return Err(Error::config("train.decay_start_epoch", "must be smaller than train.epochs"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if !(self.lr_base >= 0.0) || !self.lr_base.is_finite() {
            return Err(Error::config("train.lr_base", "must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("train.momentum", "must lie in [0, 1)"));
        }
        if !(self.tau > 0.0) {
            return Err(Error::config("train.tau", "must be positive"));
        }
        if self.train_resolution < 16 {
            return Err(Error::config("train.train_resolution", "must be at least 16"));
        }
        if self.crop_size == 0 || self.crop_size > self.train_resolution {
            return Err(Error::config("train.crop_size", "must lie in [1, train_resolution]"));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::config("train.checkpoint_every", "must be positive"));
        }
        if !(self.supervised_mu >= -95.0) {
            return Err(Error::config("train.supervised_mu", "must be >= -95"));
        }
        self.loss_weights.validate()?;
        self.supervised_weights.validate()
    }
}

/// Everything that determines a run's networks and data stream.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub augment: AugmentationConfig,
    pub networks: NetworkConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.augment.validate()?;
        self.networks.validate()?;
        if self.train.mode == Mode::Weak {
            let patch = self.networks.critic.receptive_patch();
            if self.train.crop_size < patch {
                return Err(Error::config(
                    "train.crop_size",
                    format!("must cover the critic's {patch}px receptive patch"),
                ));
            }
            if !(self.augment.mu >= 5.0) {
                return Err(Error::config("augment.mu", "must be >= 5 in weak mode"));
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> Result<String> {
        let bytes = serde_json::to_vec(self)?;
        Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
    }
}

/// Constant `lr_base` before `decay_start_epoch`, then linear to 0 at `epochs`.
pub fn lr_schedule(epoch: f64, cfg: &TrainConfig) -> Result<f64> {
    let total = cfg.epochs as f64;
    if !(0.0..=total).contains(&epoch) {
        return Err(Error::contract(format!("epoch {epoch} outside [0, {total}]")));
    }
    let knee = cfg.decay_start_epoch as f64;
    if epoch < knee {
        Ok(cfg.lr_base)
    } else {
        Ok(cfg.lr_base * (total - epoch) / (total - knee))
    }
}

/// Fraction of the easiest samples exposed at `epoch`.
pub fn curriculum_pace(epoch: usize, cfg: &TrainConfig) -> f64 {
    (0.3 + 0.7 * epoch as f64 / cfg.decay_start_epoch.max(1) as f64).min(1.0)
}

/// Sample order for one epoch: a seeded shuffle of everything, or of the
/// easiest [`curriculum_pace`] fraction when the curriculum is on.
pub fn epoch_order<R: Rng + ?Sized>(
    scores: &[f64],
    epoch: usize,
    curriculum: bool,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Vec<usize> {
    let n = scores.len();
    let mut pool: Vec<usize> = (0..n).collect();
    if curriculum && n > 0 {
        pool.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
        let k = ((curriculum_pace(epoch, cfg) * n as f64 - 1e-9).ceil() as usize).clamp(1, n);
        pool.truncate(k);
    }
    pool.shuffle(rng);
    pool
}

/// One permutation (or curriculum pool) per epoch.
pub fn curriculum_order<R: Rng + ?Sized>(
    scores: &[f64],
    curriculum: bool,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Vec<Vec<usize>> {
    (0..cfg.epochs).map(|e| epoch_order(scores, e, curriculum, cfg, rng)).collect()
}

/// Builds the frozen extractor: pretrained weights from `weights`, or seeded
/// random weights when the network config asks for them.
pub fn perceptual_extractor(
    cfg: &NetworkConfig,
    weights: Option<&Path>,
    seed: u64,
    device: &Device,
) -> Result<PerceptualExtractor> {
    if cfg.perceptual_random {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5647_4731_3600);
        PerceptualExtractor::random(cfg.perceptual_width, &mut rng, device)
    } else {
        PerceptualExtractor::load(&PerceptualExtractor::resolve_path(weights)?, device)
    }
}

/// Loss values of one optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub samples: Vec<String>,
    pub losses: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub steps: u64,
    pub skipped: u64,
    pub means: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum StepOutcome {
    Trained(StepRecord),
    Skipped,
}

/// Loss-term names per mode, in CSV column order.
pub fn loss_terms(mode: Mode) -> &'static [&'static str] {
    match mode {
        Mode::Weak => &[
            "critic",
            "nce",
            "identity",
            "critic_distill",
            "adversarial",
            "illumination",
            "refine_nce",
            "perceptual",
        ],
        Mode::Supervised => &[
            "nce",
            "identity",
            "illumination",
            "refine_nce",
            "perceptual",
            "pixel",
            "color",
            "style",
        ],
    }
}

/// Networks, optimizer buffers, counters, generator state and history.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub networks: Networks,
    pub optimizer: Sgd,
    /// Next epoch to run.
    pub epoch: usize,
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub history: Vec<EpochRecord>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: RunConfig,
    config_hash: String,
    epoch: usize,
    step: u64,
    rng: ChaCha8Rng,
    history: Vec<EpochRecord>,
}

const OPTIM_PREFIX: &str = "optim.";

/// Restores only the networks and config of a checkpoint (for inference).
pub fn load_networks(path: &Path, device: &Device) -> Result<(RunConfig, Networks)> {
    let (meta, tensors) = checkpoint::load(path, device)?;
    let meta: CheckpointMeta = serde_json::from_value(meta)?;
    let networks = restore_networks(&meta.config, &tensors, device)?;
    Ok((meta.config, networks))
}

fn restore_networks(config: &RunConfig, tensors: &BTreeMap<String, Tensor>, device: &Device) -> Result<Networks> {
    let nets = Networks::new(&config.networks, config.train.mode == Mode::Weak, config.train.seed, device)?;
    let mut claimed = 0;
    for (group, store) in nets.groups() {
        let prefix = format!("{group}.");
        let sub: BTreeMap<String, Tensor> = tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&prefix).map(|n| (n.to_string(), v.clone())))
            .collect();
        claimed += sub.len();
        store.load(&sub)?;
    }
    let optim = tensors.keys().filter(|k| k.starts_with(OPTIM_PREFIX)).count();
    if claimed + optim != tensors.len() {
        return Err(Error::Checkpoint("checkpoint holds tensors for unknown networks".into()));
    }
    Ok(nets)
}

/// Per-sample tensors shared by the sub-steps.
struct Prepared<'a> {
    triplet: &'a ShadowTriplet,
    s: Tensor,
    m: Tensor,
    s_s: Tensor,
    region: RegionTensor,
}

#[derive(Default)]
struct TermLog {
    sums: BTreeMap<String, f64>,
    counts: BTreeMap<String, usize>,
}

impl TermLog {
    fn add(&mut self, k: &str, v: f64) {
        *self.sums.entry(k.to_string()).or_default() += v;
        *self.counts.entry(k.to_string()).or_default() += 1;
    }

    fn means(&self) -> BTreeMap<String, f64> {
        self.sums
            .iter()
            .map(|(k, s)| (k.clone(), s / self.counts[k] as f64))
            .collect()
    }
}

pub struct Trainer {
    config: RunConfig,
    state: TrainState,
    vgg: PerceptualExtractor,
    bank: MaskBank,
    trace: Vec<StepRecord>,
    device: Device,
}

impl Trainer {
    pub fn new(config: RunConfig, vgg: PerceptualExtractor, device: &Device) -> Result<Self> {
        config.validate()?;
        let seed = config.train.seed;
        let networks = Networks::new(&config.networks, config.train.mode == Mode::Weak, seed, device)?;
        let state = TrainState {
            networks,
            optimizer: Sgd::new(config.train.momentum)?,
            epoch: 0,
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(seed.wrapping_add(1)),
            history: Vec::new(),
        };
        Ok(Self {
            config,
            state,
            vgg,
            bank: MaskBank::default(),
            trace: Vec::new(),
            device: device.clone(),
        })
    }

    /// Restores a run saved by [`Trainer::save`].
    pub fn resume(path: &Path, vgg: PerceptualExtractor, device: &Device) -> Result<Self> {
        let (meta, tensors) = checkpoint::load(path, device)?;
        let meta: CheckpointMeta = serde_json::from_value(meta)?;
        if meta.config.hash()? != meta.config_hash {
            return Err(Error::Checkpoint("config hash does not match stored config".into()));
        }
        meta.config.validate()?;
        let networks = restore_networks(&meta.config, &tensors, device)?;
        let mut optimizer = Sgd::new(meta.config.train.momentum)?;
        optimizer.load_buffers(
            tensors
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(OPTIM_PREFIX).map(|n| (n.to_string(), v.clone())))
                .collect(),
        );
        Ok(Self {
            config: meta.config,
            state: TrainState {
                networks,
                optimizer,
                epoch: meta.epoch,
                step: meta.step,
                rng: meta.rng,
                history: meta.history,
            },
            vgg,
            bank: MaskBank::default(),
            trace: Vec::new(),
            device: device.clone(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = CheckpointMeta {
            config: self.config.clone(),
            config_hash: self.config.hash()?,
            epoch: self.state.epoch,
            step: self.state.step,
            rng: self.state.rng.clone(),
            history: self.state.history.clone(),
        };
        let mut tensors = BTreeMap::new();
        for (group, store) in self.state.networks.groups() {
            for (name, t) in store.snapshot()? {
                tensors.insert(format!("{group}.{name}"), t);
            }
        }
        for (k, v) in self.state.optimizer.buffers() {
            tensors.insert(format!("{OPTIM_PREFIX}{k}"), v.clone());
        }
        checkpoint::save(path, &serde_json::to_value(&meta)?, &tensors)
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn networks(&self) -> &Networks {
        &self.state.networks
    }

    /// Loss records of every step run by this process.
    pub fn trace(&self) -> &[StepRecord] {
        &self.trace
    }

    pub fn set_mask_bank(&mut self, bank: MaskBank) {
        self.bank = bank;
    }

    fn lr(&self) -> Result<f64> {
        lr_schedule(self.state.epoch as f64, &self.config.train)
    }

    fn prepare<'a>(&self, t: &'a ShadowTriplet) -> Result<Prepared<'a>> {
        let s = t.shadow.to_tensor(DType::F32, &self.device)?;
        let m = t.mask.to_tensor(DType::F32, &self.device)?;
        let s_s = s.broadcast_mul(&m)?;
        Ok(Prepared {
            triplet: t,
            s,
            m,
            s_s,
            region: extract_region(&t.shadow, &t.mask)?,
        })
    }

    fn check(&self, term: &str, t: &Tensor, sample: &str) -> Result<f64> {
        let v = losses::value(t)?;
        if !v.is_finite() {
            log::error!("non-finite `{term}` on `{sample}` at step {}", self.state.step);
            return Err(Error::NonFinite {
                term: term.into(),
                sample: sample.into(),
                step: self.state.step,
            });
        }
        Ok(v)
    }

    fn crop<R: Rng + ?Sized>(&self, t: &ShadowTriplet, rng: &mut R) -> Result<Option<(Tensor, Tensor)>> {
        let c = self.config.train.crop_size;
        match sample_nonshadow_crop(t, (c, c), rng) {
            Ok(r) => Ok(Some((
                r.to_tensor(DType::F32, &self.device)?,
                r.mask().to_tensor(DType::F32, &self.device)?,
            ))),
            Err(Error::SamplingExhausted { .. }) => {
                log::debug!("no non-shadow crop in `{}`", t.id);
                Ok(None)
            }
            Err(e) => Err(e),
        }
    }

    /// Contrastive embeddings of three images through one encoder/head pair,
    /// at locations drawn from the first stack.
    fn contrast(
        &mut self,
        refiner: bool,
        query: &Tensor,
        positive: &Tensor,
        negative: &Tensor,
        support: Option<&crate::imaging::ShadowMask>,
    ) -> Result<Tensor> {
        let nets = &self.state.networks;
        let (enc, head) = if refiner {
            (&nets.refiner, &nets.refiner_head)
        } else {
            (&nets.deshadower, &nets.deshadower_head)
        };
        let fq = enc.encode(query)?;
        let fp = enc.encode(positive)?;
        let fn_ = enc.encode(negative)?;
        let locs = Locations::sample(&fn_, support, nets.config.nce_locations, &mut self.state.rng)?;
        losses::layerwise_nce(
            &head.project(&fq, &locs)?,
            &head.project(&fp, &locs)?,
            &head.project(&fn_, &locs)?,
            self.config.train.tau,
        )
    }

    fn split_empty<'a>(&self, batch: &'a [ShadowTriplet]) -> Vec<&'a ShadowTriplet> {
        batch
            .iter()
            .filter(|t| {
                if t.mask.is_empty() {
                    log::warn!("skipping `{}`: empty shadow mask", t.id);
                    false
                } else {
                    true
                }
            })
            .collect()
    }

    /// One weakly-supervised update: critic, then DeShadower + Illumination
    /// generator + heads, then Refinement network.
    pub fn train_step_weak(&mut self, batch: &[ShadowTriplet]) -> Result<StepOutcome> {
        if self.config.train.mode != Mode::Weak {
            return Err(Error::contract("weak step on a supervised run"));
        }
        let live = self.split_empty(batch);
        if live.is_empty() {
            return Ok(StepOutcome::Skipped);
        }
        let lr = self.lr()?;
        let n = live.len() as f64;
        let w = self.config.train.loss_weights.clone();
        let mu = self.config.augment.mu;
        let prepared: Vec<Prepared> = live.iter().map(|t| self.prepare(t)).collect::<Result<_>>()?;
        let mut log = TermLog::default();

        // (a) critic
        let mut crops = Vec::with_capacity(prepared.len());
        let mut critic_terms = Vec::new();
        for p in &prepared {
            let nets = &self.state.networks;
            let fake = nets.illuminate_tensor(&p.s_s, &p.m)?.detach();
            let variants = illumination_variants(&p.region, mu)?
                .iter()
                .map(|v| v.to_tensor(DType::F32, &self.device))
                .collect::<Result<Vec<_>>>()?;
            let variants = Tensor::cat(&variants, 0)?;
            let mut rng = self.state.rng.clone();
            let crop = self.crop(p.triplet, &mut rng)?;
            self.state.rng = rng;
            let nets = &self.state.networks;
            let fake_scores = nets.critic_tensor(&fake)?;
            let variant_scores = nets.critic_tensor(&variants)?;
            let crop_scores = crop.as_ref().map(|(c, _)| nets.critic_tensor(c)).transpose()?;
            let mut reals = vec![&variant_scores];
            if let Some(c) = &crop_scores {
                reals.push(c);
            }
            let (_, critic) = losses::adversarial_losses(&fake_scores, &reals)?;
            log.add("critic", self.check("critic", &critic, &p.triplet.id)?);
            critic_terms.push(critic);
            crops.push(crop);
        }
        let critic_total = losses::sum(&critic_terms)?.affine(1.0 / n, 0.0)?;
        let grads = critic_total.backward()?;
        let nets = &self.state.networks;
        if let Some(c) = &nets.critic {
            self.state.optimizer.step("critic", c.params(), &grads, lr)?;
        }

        // (b) DeShadower, Illumination generator and their heads
        let mut gen_terms = Vec::new();
        let mut removed = Vec::with_capacity(prepared.len());
        for (p, crop) in prepared.iter().zip(&crops) {
            let id = &p.triplet.id;
            let (s_r, _) = self.state.networks.deshadow_tensor(&p.s_s, &p.m)?;
            let b = self.state.networks.illuminate_tensor(&p.s_s, &p.m)?;
            let nce = self.contrast(false, &s_r, &b.detach(), &p.s_s, Some(&p.triplet.mask))?;
            let nets = &self.state.networks;
            let distill = losses::critic_distill_loss(&nets.critic_tensor(&s_r)?)?;
            // Generator side of the least-squares objective has the same form.
            let adversarial = losses::critic_distill_loss(&nets.critic_tensor(&b)?)?;
            let illumination = losses::illumination_loss(&s_r, &b, &p.m)?;
            let mut terms = vec![
                ("nce", w.nce, nce),
                ("critic_distill", w.critic_distill, distill),
                ("adversarial", w.adversarial, adversarial),
                ("illumination", w.illumination, illumination),
            ];
            if let Some((c, cm)) = crop {
                let (out, _) = nets.deshadow_tensor(c, cm)?;
                terms.push(("identity", w.identity, losses::identity_loss(&out, c, cm)?));
            }
            let mut weighted = Vec::new();
            for (name, weight, t) in terms {
                log.add(name, self.check(name, &t, id)?);
                weighted.push(t.affine(weight, 0.0)?);
            }
            gen_terms.push(losses::sum(&weighted)?);
            removed.push(s_r.detach());
        }
        let gen_total = losses::sum(&gen_terms)?.affine(1.0 / n, 0.0)?;
        let grads = gen_total.backward()?;
        let nets = &self.state.networks;
        let opt = &mut self.state.optimizer;
        opt.step("deshadower", nets.deshadower.params(), &grads, lr)?;
        opt.step("deshadower_head", nets.deshadower_head.params(), &grads, lr)?;
        if let Some(i) = &nets.illumination {
            opt.step("illumination", i.params(), &grads, lr)?;
        }

        // (c) Refinement network
        let mut ref_terms = Vec::new();
        for (p, s_r) in prepared.iter().zip(&removed) {
            let embedded = (&p.s - p.s.broadcast_mul(&p.m)?)?.add(&s_r.broadcast_mul(&p.m)?)?;
            let t = self.refine_terms(p, &embedded, &w, &mut log)?;
            ref_terms.push(t);
        }
        let ref_total = losses::sum(&ref_terms)?.affine(1.0 / n, 0.0)?;
        let grads = ref_total.backward()?;
        let nets = &self.state.networks;
        let opt = &mut self.state.optimizer;
        opt.step("refiner", nets.refiner.params(), &grads, lr)?;
        opt.step("refiner_head", nets.refiner_head.params(), &grads, lr)?;

        Ok(self.finish_step(live, log))
    }

    /// Refinement contrastive + perceptual terms for one embedded image.
    fn refine_terms(&mut self, p: &Prepared, embedded: &Tensor, w: &TermWeights, log: &mut TermLog) -> Result<Tensor> {
        let id = &p.triplet.id;
        let (refined, _) = self.state.networks.refiner.forward(embedded)?;
        let positive_img = ImageTensor::from_tensor(&embedded.detach())?;
        let positive = refinement_positive(
            &positive_img,
            &p.triplet.mask,
            &self.config.augment.positive,
            &mut self.state.rng,
        )?
        .to_tensor(DType::F32, &self.device)?;
        let rnce = self.contrast(true, &refined, &positive, &p.s, None)?;
        let perceptual = losses::refinement_perceptual(&self.vgg, &refined, &p.s)?;
        log.add("refine_nce", self.check("refine_nce", &rnce, id)?);
        log.add("perceptual", self.check("perceptual", &perceptual, id)?);
        let mut total = (rnce.affine(w.refine_nce, 0.0)? + perceptual.affine(w.perceptual, 0.0)?)?;
        if self.config.train.mode == Mode::Supervised {
            let g = p
                .triplet
                .shadow_free
                .as_ref()
                .expect("checked by caller")
                .to_tensor(DType::F32, &self.device)?;
            let terms = losses::supervised_terms(&self.vgg, &refined, &g)?;
            log.add("pixel", self.check("pixel", &terms.pixel, id)?);
            log.add("color", self.check("color", &terms.color, id)?);
            log.add("style", self.check("style", &terms.style, id)?);
            total = (total + terms.weighted(&self.config.train.supervised_weights)?)?;
        }
        Ok(total)
    }

    /// One fully-supervised update of DeShadower, Refinement network and
    /// heads. Positives come from brightness variants of the ground truth and
    /// the supervised losses back-propagate through both networks.
    pub fn train_step_supervised(&mut self, batch: &[ShadowTriplet]) -> Result<StepOutcome> {
        if self.config.train.mode != Mode::Supervised {
            return Err(Error::contract("supervised step on a weak run"));
        }
        if let Some(t) = batch.iter().find(|t| t.shadow_free.is_none()) {
            return Err(Error::contract(format!("sample `{}` has no shadow-free ground truth", t.id)));
        }
        let live = self.split_empty(batch);
        if live.is_empty() {
            return Ok(StepOutcome::Skipped);
        }
        let lr = self.lr()?;
        let n = live.len() as f64;
        let w = self.config.train.loss_weights.clone();
        let mu = self.config.train.supervised_mu;
        let prepared: Vec<Prepared> = live.iter().map(|t| self.prepare(t)).collect::<Result<_>>()?;
        let mut log = TermLog::default();
        let mut totals = Vec::new();
        for p in &prepared {
            let id = &p.triplet.id;
            let g = p.triplet.shadow_free.as_ref().expect("checked above");
            let g_region = extract_region(g, &p.triplet.mask)?;
            let pick = self.state.rng.random_range(0..3);
            let b = brightness_variants(&g_region, mu)?[pick].to_tensor(DType::F32, &self.device)?;
            let mut rng = self.state.rng.clone();
            let crop = self.crop(p.triplet, &mut rng)?;
            self.state.rng = rng;

            let (s_r, _) = self.state.networks.deshadow_tensor(&p.s_s, &p.m)?;
            let nce = self.contrast(false, &s_r, &b.detach(), &p.s_s, Some(&p.triplet.mask))?;
            let illumination = losses::illumination_loss(&s_r, &b, &p.m)?;
            let mut terms = vec![("nce", w.nce, nce), ("illumination", w.illumination, illumination)];
            if let Some((c, cm)) = &crop {
                let (out, _) = self.state.networks.deshadow_tensor(c, cm)?;
                terms.push(("identity", w.identity, losses::identity_loss(&out, c, cm)?));
            }
            let mut weighted = Vec::new();
            for (name, weight, t) in terms {
                log.add(name, self.check(name, &t, id)?);
                weighted.push(t.affine(weight, 0.0)?);
            }
            let embedded = (&p.s - p.s.broadcast_mul(&p.m)?)?.add(&s_r.broadcast_mul(&p.m)?)?;
            weighted.push(self.refine_terms(p, &embedded, &w, &mut log)?);
            totals.push(losses::sum(&weighted)?);
        }
        let total = losses::sum(&totals)?.affine(1.0 / n, 0.0)?;
        let grads = total.backward()?;
        let nets = &self.state.networks;
        let opt = &mut self.state.optimizer;
        opt.step("deshadower", nets.deshadower.params(), &grads, lr)?;
        opt.step("deshadower_head", nets.deshadower_head.params(), &grads, lr)?;
        opt.step("refiner", nets.refiner.params(), &grads, lr)?;
        opt.step("refiner_head", nets.refiner_head.params(), &grads, lr)?;
        Ok(self.finish_step(live, log))
    }

    fn finish_step(&mut self, live: Vec<&ShadowTriplet>, log: TermLog) -> StepOutcome {
        let record = StepRecord {
            epoch: self.state.epoch,
            step: self.state.step,
            samples: live.iter().map(|t| t.id.clone()).collect(),
            losses: log.means(),
        };
        self.state.step += 1;
        self.trace.push(record.clone());
        StepOutcome::Trained(record)
    }

    /// Dispatches to the mode's step function.
    pub fn train_step(&mut self, batch: &[ShadowTriplet]) -> Result<StepOutcome> {
        match self.config.train.mode {
            Mode::Weak => self.train_step_weak(batch),
            Mode::Supervised => self.train_step_supervised(batch),
        }
    }

    /// Resizes to the training resolution, then inpaints and augments as
    /// configured.
    pub fn prepare_sample(&mut self, t: &ShadowTriplet) -> Result<ShadowTriplet> {
        let mut t = to_resolution(t, self.config.train.train_resolution)?;
        if self.config.train.inpaint && self.config.augment.inpaint_enabled && !t.mask.is_empty() && !self.bank.is_empty() {
            match inpaint_shadow(&t, &self.bank, &self.config.augment, &mut self.state.rng) {
                Ok(inpainted) => t = inpainted,
                Err(Error::SamplingExhausted { .. }) => log::debug!("no inpainting site for `{}`", t.id),
                Err(e) => return Err(e),
            }
        }
        if self.config.train.augment {
            t = standard_augment(&t, &self.config.augment, &mut self.state.rng)?;
        }
        Ok(t)
    }
}

/// Bilinear resize of the images, nearest-neighbour resize of the mask.
pub fn to_resolution(t: &ShadowTriplet, side: usize) -> Result<ShadowTriplet> {
    if t.dims() == (side, side) {
        return Ok(t.clone());
    }
    ShadowTriplet::new(
        t.id.clone(),
        resize(&t.shadow, side, side)?,
        t.mask.resize_nearest(side, side)?,
        t.shadow_free.as_ref().map(|g| resize(g, side, side)).transpose()?,
    )
}

/// Where [`fit`] writes its artifacts.
#[derive(Clone, Debug)]
pub struct FitOptions {
    pub checkpoint_dir: PathBuf,
    pub log_dir: PathBuf,
}

impl FitOptions {
    pub fn loss_csv(&self) -> PathBuf {
        self.log_dir.join("losses.csv")
    }

    pub fn checkpoint_path(&self, epoch: usize) -> PathBuf {
        self.checkpoint_dir.join(format!("epoch_{epoch:04}.ckpt"))
    }

    pub fn last_path(&self) -> PathBuf {
        self.checkpoint_dir.join("last.ckpt")
    }
}

fn csv_header(mode: Mode) -> String {
    let mut cols = vec!["epoch", "lr", "steps", "skipped"];
    cols.extend(loss_terms(mode));
    cols.join(",")
}

fn csv_row(mode: Mode, r: &EpochRecord) -> String {
    let mut cells = vec![r.epoch.to_string(), format!("{:e}", r.lr), r.steps.to_string(), r.skipped.to_string()];
    for term in loss_terms(mode) {
        cells.push(r.means.get(*term).map(|v| format!("{v}")).unwrap_or_default());
    }
    cells.join(",")
}

/// Curriculum difficulty of every sample at training resolution, plus the
/// mask bank for inpainting.
fn survey(split: &DatasetSplit, side: usize) -> Result<(Vec<f64>, MaskBank)> {
    let order: Vec<usize> = (0..split.len()).collect();
    let mut scores = Vec::with_capacity(split.len());
    let mut masks = Vec::with_capacity(split.len());
    for t in split.iterate(&order)? {
        let t = to_resolution(&t?, side)?;
        scores.push(curriculum_score(&t));
        masks.push(t.mask);
    }
    Ok((scores, bank_from_masks(&masks)))
}

/// Runs the remaining epochs of `trainer` over `split`, writing a loss CSV
/// row per epoch and checkpoints every `checkpoint_every` epochs and at the
/// end. Returns the final checkpoint path.
pub fn fit(trainer: &mut Trainer, split: Arc<DatasetSplit>, opts: &FitOptions) -> Result<PathBuf> {
    if split.is_empty() {
        return Err(Error::contract("training split is empty"));
    }
    let cfg = trainer.config.train.clone();
    if cfg.mode == Mode::Supervised {
        if let Some(e) = split.entries().iter().find(|e| !e.has_ground_truth()) {
            return Err(Error::contract(format!("sample `{}` has no shadow-free ground truth", e.id)));
        }
    }
    std::fs::create_dir_all(&opts.checkpoint_dir)?;
    std::fs::create_dir_all(&opts.log_dir)?;
    let (scores, bank) = survey(&split, cfg.train_resolution)?;
    trainer.set_mask_bank(bank);
    let csv_path = opts.loss_csv();
    if trainer.state.epoch == 0 || !csv_path.exists() {
        std::fs::write(&csv_path, format!("{}\n", csv_header(cfg.mode)))?;
    }
    let mut last = None;
    let reached_cap = |t: &Trainer| cfg.max_steps.is_some_and(|m| t.state.step >= m);
    while trainer.state.epoch < cfg.epochs && !reached_cap(trainer) {
        let epoch = trainer.state.epoch;
        let lr = trainer.lr()?;
        let order = epoch_order(&scores, epoch, cfg.curriculum, &cfg, &mut trainer.state.rng);
        let mut log = TermLog::default();
        let (mut steps, mut skipped) = (0u64, 0u64);
        let mut batch = Vec::with_capacity(cfg.batch_size);
        let mut stream = split.iterate_prefetched(order, cfg.prefetch.max(1))?.peekable();
        while let Some(item) = stream.next() {
            batch.push(trainer.prepare_sample(&item?)?);
            if batch.len() < cfg.batch_size && stream.peek().is_some() {
                continue;
            }
            match trainer.train_step(&batch)? {
                StepOutcome::Trained(r) => {
                    steps += 1;
                    for (k, v) in &r.losses {
                        log.add(k, *v);
                    }
                }
                StepOutcome::Skipped => skipped += 1,
            }
            batch.clear();
            if reached_cap(trainer) {
                break;
            }
        }
        let record = EpochRecord {
            epoch,
            lr,
            steps,
            skipped,
            means: log.means(),
        };
        log::info!(
            "epoch {epoch}: lr {lr:.3e}, {steps} steps, {}",
            record
                .means
                .iter()
                .map(|(k, v)| format!("{k} {v:.4}"))
                .collect::<Vec<_>>()
                .join(", ")
        );
        let mut f = OpenOptions::new().append(true).open(&csv_path)?;
        writeln!(f, "{}", csv_row(cfg.mode, &record))?;
        trainer.state.history.push(record);
        trainer.state.epoch += 1;
        let done = trainer.state.epoch == cfg.epochs || reached_cap(trainer);
        if trainer.state.epoch % cfg.checkpoint_every == 0 || done {
            let path = opts.checkpoint_path(trainer.state.epoch);
            trainer.save(&path)?;
            std::fs::copy(&path, opts.last_path())?;
            last = Some(path);
        }
    }
    match last {
        Some(p) => Ok(p),
        None => {
            let path = opts.last_path();
            trainer.save(&path)?;
            Ok(path)
        }
    }
}
