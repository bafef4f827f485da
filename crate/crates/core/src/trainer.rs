//! Two-phase training loop, learning-rate schedule, Dice evaluation,
//! metrics logging and checkpoint mapping.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::cfd::{self, PromptInit};
use crate::checkpoint::{self, NamedTensors};
use crate::dataio::{load_dataset, Dataset, Split};
use crate::error::{Error, Result};
use crate::graph::RunningStats;
use crate::image::{images_to_tensor, masks_to_tensor, Mask, Sample};
use crate::nn::Forward;
use crate::optim::{Sgd, DEFAULT_MOMENTUM};
use crate::params::ParamId;
use crate::rng::{purpose, stream, StreamRng};
use crate::segmodel::{Arch, InferHooks, Model};
use crate::styleaug::{make_style_batch, spatial_augment, AugConfig, StyleMode};
use crate::tensor::Tensor;

pub const METRICS_HEADER: &str = "epoch,step,lr,l_seg,l_str,l_sty,domain,dice_od,dice_oc";
const EVAL_BATCH: usize = 8;

/// Flat training configuration, as read from JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub seed: u64,
    pub data_root: PathBuf,
    pub source: String,
    pub targets: Vec<String>,
    pub out_dir: PathBuf,
    pub eval_every: usize,

    pub channels: usize,
    pub depth: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    pub tau: f64,
    pub prompt_init: PromptInit,
    pub cfd: bool,
    pub style_margin: Option<f64>,

    pub enable_ba: bool,
    pub enable_sl: bool,
    pub enable_fr: bool,
    pub enable_spatial: bool,
    pub gamma_range: [f64; 2],
    pub noise_sigma_range: [f64; 2],
    pub blur_sigma_range: [f64; 2],
    pub beta_range: [f64; 2],
    pub bezier_lut_size: usize,
    pub rotation_range_deg: [f64; 2],
    pub scale_range: [f64; 2],
    pub flip_prob: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let arch = Arch::default();
        let aug = AugConfig::default();
        Self {
            lr0: 0.01,
            epochs: 30,
            batch_size: 4,
            momentum: DEFAULT_MOMENTUM,
            seed: 0,
            data_root: PathBuf::from("data"),
            source: "A".into(),
            targets: vec!["B".into(), "C".into(), "D".into()],
            out_dir: PathBuf::from("runs/default"),
            eval_every: 1,
            channels: arch.channels,
            depth: arch.depth,
            stem_kernel: arch.stem_kernel,
            stem_stride: arch.stem_stride,
            tau: arch.tau,
            prompt_init: arch.prompt_init,
            cfd: arch.cfd,
            style_margin: None,
            enable_ba: aug.enable_ba,
            enable_sl: aug.enable_sl,
            enable_fr: aug.enable_fr,
            enable_spatial: aug.enable_spatial,
            gamma_range: aug.gamma_range,
            noise_sigma_range: aug.noise_sigma_range,
            blur_sigma_range: aug.blur_sigma_range,
            beta_range: aug.beta_range,
            bezier_lut_size: aug.bezier_lut_size,
            rotation_range_deg: aug.rotation_range_deg,
            scale_range: aug.scale_range,
            flip_prob: aug.flip_prob,
        }
    }
}

impl TrainConfig {
    pub fn arch(&self) -> Arch {
        Arch {
            channels: self.channels,
            depth: self.depth,
            stem_kernel: self.stem_kernel,
            stem_stride: self.stem_stride,
            tau: self.tau,
            prompt_init: self.prompt_init,
            cfd: self.cfd,
        }
    }

    pub fn aug(&self) -> AugConfig {
        AugConfig {
            enable_ba: self.enable_ba,
            enable_sl: self.enable_sl,
            enable_fr: self.enable_fr,
            enable_spatial: self.enable_spatial,
            gamma_range: self.gamma_range,
            noise_sigma_range: self.noise_sigma_range,
            blur_sigma_range: self.blur_sigma_range,
            beta_range: self.beta_range,
            bezier_lut_size: self.bezier_lut_size,
            rotation_range_deg: self.rotation_range_deg,
            scale_range: self.scale_range,
            flip_prob: self.flip_prob,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if let Some(m) = self.style_margin {
            if !(m > 0.0 && m.is_finite()) {
                return Err(Error::Config(format!("style_margin must be positive, got {m}")));
            }
        }
        if self.source.is_empty() {
            return Err(Error::Config("source domain not set".into()));
        }
        self.arch().validate()?;
        self.aug().validate()
    }
}

/// `lr0 * (1 - e / E)^0.9`.
pub fn poly_lr(epoch: usize, lr0: f64, epochs: usize) -> Result<f64> {
    if epochs == 0 || epoch > epochs {
        return Err(Error::InvalidArgument(format!("epoch {epoch} outside [0, {epochs}]")));
    }
    Ok(lr0 * (1.0 - epoch as f64 / epochs as f64).powf(0.9))
}

/// Parameters, statistics and both optimizers.
#[derive(Clone, Debug)]
pub struct ModelState {
    pub model: Model,
    /// Stem, prompt and backbone.
    pub seg_opt: Sgd,
    /// Prompt and projector.
    pub con_opt: Sgd,
    pub epoch: usize,
}

impl ModelState {
    pub fn new(arch: Arch, seed: u64, momentum: f64) -> Result<Self> {
        let model = Model::new(arch, seed)?;
        let net = &model.net;
        let prompt = net.prompt.logits;
        let seg: Vec<ParamId> = net
            .stem_params()
            .into_iter()
            .chain([prompt])
            .chain(net.backbone_params())
            .collect();
        let con: Vec<ParamId> = std::iter::once(prompt).chain(net.projector_params()).collect();
        let seg_opt = Sgd::new(&model.store, seg, momentum);
        let con_opt = Sgd::new(&model.store, con, momentum);
        Ok(Self {
            model,
            seg_opt,
            con_opt,
            epoch: 0,
        })
    }

    /// Every tensor of the state under its checkpoint name.
    pub fn to_tensors(&self) -> NamedTensors {
        let m = &self.model;
        let mut out: NamedTensors = m.store.iter().map(|(_, n, t)| (n.to_string(), t.clone())).collect();
        for (layer, s) in &m.stats {
            out.push((format!("{layer}.running_mean"), s.mean.clone()));
            out.push((format!("{layer}.running_var"), s.var.clone()));
        }
        for (tag, opt) in [("seg", &self.seg_opt), ("con", &self.con_opt)] {
            for (id, buf) in opt.buffers() {
                out.push((format!("opt.{tag}.{}", m.store.name(id)), buf.clone()));
            }
        }
        let a = m.arch();
        let arch = vec![
            a.channels as f64,
            a.depth as f64,
            a.stem_kernel as f64,
            a.stem_stride as f64,
            a.tau,
            a.cfd as u8 as f64,
        ];
        out.push(("meta.arch".into(), Tensor::new(&[6], arch).expect("six values")));
        out.push(("meta.epoch".into(), Tensor::scalar(self.epoch as f64)));
        out.push(("meta.momentum".into(), Tensor::scalar(self.seg_opt.momentum())));
        out
    }

    pub fn from_tensors(tensors: NamedTensors) -> Result<Self> {
        let mut map: BTreeMap<String, Tensor> = BTreeMap::new();
        for (name, t) in tensors {
            if map.insert(name.clone(), t).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
            }
        }
        let mut take = |name: &str| {
            map.remove(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
        };
        let meta = take("meta.arch")?;
        let a = meta.data();
        let as_count = |v: f64, what: &str| {
            if v >= 0.0 && v.fract() == 0.0 && v < 1e6 {
                Ok(v as usize)
            } else {
                Err(Error::Checkpoint(format!("bad {what} {v} in meta.arch")))
            }
        };
        if a.len() != 6 {
            return Err(Error::Checkpoint("meta.arch must hold 6 values".into()));
        }
        let arch = Arch {
            channels: as_count(a[0], "channels")?,
            depth: as_count(a[1], "depth")?,
            stem_kernel: as_count(a[2], "stem_kernel")?,
            stem_stride: as_count(a[3], "stem_stride")?,
            tau: a[4],
            prompt_init: PromptInit::Random,
            cfd: a[5] != 0.0,
        };
        arch.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
        let epoch = as_count(take("meta.epoch")?.item(), "epoch")?;
        let momentum = take("meta.momentum")?.item();
        let mut state = ModelState::new(arch, 0, momentum)?;
        state.epoch = epoch;
        let ids: Vec<(ParamId, String)> = state.model.store.iter().map(|(id, n, _)| (id, n.to_string())).collect();
        let wrap = |e: Error| Error::Checkpoint(e.to_string());
        for (id, name) in &ids {
            state.model.store.set(*id, take(name)?).map_err(wrap)?;
        }
        let layers: Vec<String> = state.model.stats.keys().cloned().collect();
        for layer in layers {
            let mean = take(&format!("{layer}.running_mean"))?;
            let var = take(&format!("{layer}.running_var"))?;
            let slot = state.model.stats.get_mut(&layer).expect("known layer");
            if mean.dims() != slot.mean.dims() || var.dims() != slot.var.dims() {
                return Err(Error::Checkpoint(format!("{layer}: running statistics shape mismatch")));
            }
            *slot = RunningStats { mean, var };
        }
        for (tag, opt) in [("seg", &mut state.seg_opt), ("con", &mut state.con_opt)] {
            let members: Vec<ParamId> = opt.members().iter().copied().collect();
            for id in members {
                let name = &ids[id.index()].1;
                opt.set_buffer(id, take(&format!("opt.{tag}.{name}"))?).map_err(wrap)?;
            }
        }
        if let Some(extra) = map.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
        }
        Ok(state)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.to_tensors())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tensors(checkpoint::load(path)?)
    }
}

/// Losses and gradient key sets of one step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub l_seg: f64,
    /// Absent when the contrastive phase did not run.
    pub l_str: Option<f64>,
    pub l_sty: Option<f64>,
    pub seg_keys: BTreeSet<ParamId>,
    pub con_keys: BTreeSet<ParamId>,
}

fn finite(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("{name} = {v}")))
    }
}

fn check_batch(source: &[Sample], augmented: Option<&[Sample]>) -> Result<()> {
    if source.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if let Some(a) = augmented {
        if a.len() != source.len() {
            return Err(Error::InvalidArgument(format!(
                "{} augmented samples for {} sources",
                a.len(),
                source.len()
            )));
        }
    }
    Ok(())
}

fn batch_images(source: &[Sample], augmented: Option<&[Sample]>) -> Result<Tensor> {
    images_to_tensor(source.iter().chain(augmented.unwrap_or(&[])).map(|s| &s.image))
}

/// Segmentation loss on `[source; augmented]`, one step of the
/// segmentation optimizer. Returns the loss and the updated parameters.
pub fn segmentation_phase(
    state: &mut ModelState,
    source: &[Sample],
    augmented: Option<&[Sample]>,
    lr: f64,
) -> Result<(f64, BTreeSet<ParamId>)> {
    check_batch(source, augmented)?;
    let n = source.len();
    let images = batch_images(source, augmented)?;
    let target = masks_to_tensor(source)?;
    let model = &mut state.model;
    let (l_seg, grads) = {
        let mut f = Forward::train(&model.store, &mut model.stats);
        let x = f.input(images)?;
        let probs = model.net.segment(&mut f, x)?;
        let y = f.input(target)?;
        let loss = match augmented {
            None => f.graph.bce(probs, y)?,
            Some(_) => {
                let ps = f.graph.narrow_batch(probs, 0, n)?;
                let pa = f.graph.narrow_batch(probs, n, n)?;
                let ls = f.graph.bce(ps, y)?;
                let la = f.graph.bce(pa, y)?;
                f.graph.add(ls, la)?
            }
        };
        let value = finite("segmentation loss", f.value(loss).item())?;
        (value, f.graph.backward(loss)?.into_params())
    };
    state.seg_opt.step(&mut model.store, &grads, lr)?;
    Ok((l_seg, grads.into_keys().collect()))
}

/// Contrastive losses `(structure, style)` with the stem held fixed, one
/// step of the contrastive optimizer.
pub fn contrastive_phase(
    state: &mut ModelState,
    source: &[Sample],
    augmented: &[Sample],
    lr: f64,
    style_margin: Option<f64>,
) -> Result<(f64, f64, BTreeSet<ParamId>)> {
    check_batch(source, Some(augmented))?;
    let n = source.len();
    let images = batch_images(source, Some(augmented))?;
    let model = &mut state.model;
    if !model.net.arch.cfd {
        return Err(Error::InvalidArgument("contrastive phase needs a model with a channel prompt".into()));
    }
    let (l_str, l_sty, grads) = {
        let net = &model.net;
        let mut f = Forward::train(&model.store, &mut model.stats);
        f.freeze(net.stem_params());
        let x = f.input(images)?;
        let feat = net.stem.forward(&mut f, x)?;
        let parts = cfd::disentangle(&mut f, feat, &net.prompt)?;
        let p_str = net.projector.forward(&mut f, parts.structure)?;
        let p_sty = net.projector.forward(&mut f, parts.style)?;
        let halves = |f: &mut Forward, v| -> Result<_> { Ok((f.graph.narrow_batch(v, 0, n)?, f.graph.narrow_batch(v, n, n)?)) };
        let str_pair = halves(&mut f, p_str)?;
        let sty_pair = halves(&mut f, p_sty)?;
        let losses = cfd::contrastive_losses(&mut f, str_pair, sty_pair, style_margin)?;
        let total = f.graph.add(losses.structure, losses.style)?;
        let l_str = finite("structure loss", f.value(losses.structure).item())?;
        let l_sty = finite("style loss", f.value(losses.style).item())?;
        (l_str, l_sty, f.graph.backward(total)?.into_params())
    };
    state.con_opt.step(&mut model.store, &grads, lr)?;
    Ok((l_str, l_sty, grads.into_keys().collect()))
}

/// One alternating step on a source batch and its optional augmented
/// counterpart (same order, same labels). The contrastive phase runs only
/// with a channel prompt and an augmented view.
pub fn train_step(
    state: &mut ModelState,
    source: &[Sample],
    augmented: Option<&[Sample]>,
    lr: f64,
    style_margin: Option<f64>,
) -> Result<StepReport> {
    check_batch(source, augmented)?;
    let (l_seg, seg_keys) = segmentation_phase(state, source, augmented, lr)?;
    let mut report = StepReport {
        l_seg,
        l_str: None,
        l_sty: None,
        seg_keys,
        con_keys: BTreeSet::new(),
    };
    if let (true, Some(aug)) = (state.model.net.arch.cfd, augmented) {
        let (l_str, l_sty, keys) = contrastive_phase(state, source, aug, lr, style_margin)?;
        report.l_str = Some(l_str);
        report.l_sty = Some(l_sty);
        report.con_keys = keys;
    }
    Ok(report)
}

/// Dice overlap in percent; 100 when both masks are empty.
pub fn dice(pred: &Mask, truth: &Mask) -> Result<f64> {
    if (pred.height(), pred.width()) != (truth.height(), truth.width()) {
        return Err(Error::shape(
            "dice",
            format!("{}x{} vs {}x{}", pred.height(), pred.width(), truth.height(), truth.width()),
        ));
    }
    dice_raw(pred.data(), truth.data())
}

/// [`dice`] on raw `{0, 1}` slices.
pub fn dice_raw(a: &[u8], b: &[u8]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("dice", format!("{} vs {} pixels", a.len(), b.len())));
    }
    if a.iter().chain(b).any(|&v| v > 1) {
        return Err(Error::InvalidArgument("dice needs binary masks".into()));
    }
    let inter: usize = a.iter().zip(b).map(|(&x, &y)| (x & y) as usize).sum();
    let total: usize = a.iter().chain(b).map(|&v| v as usize).sum();
    Ok(if total == 0 { 100.0 } else { 100.0 * 2.0 * inter as f64 / total as f64 })
}

/// Mean Dice of one domain.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DomainDice {
    pub od: f64,
    pub oc: f64,
}

impl DomainDice {
    pub fn mean(&self) -> f64 {
        (self.od + self.oc) / 2.0
    }
}

/// Binarized predictions for each sample, batch by batch.
pub fn predict_masks(model: &Model, samples: &[&Sample], hooks: &InferHooks) -> Result<Vec<(Mask, Mask)>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let x = images_to_tensor(chunk.iter().map(|s| &s.image))?;
        let probs = model.infer(&x, hooks)?;
        let [_, _, h, w] = probs.dims() else { unreachable!("infer returns rank 4") };
        let plane = h * w;
        for (i, _) in chunk.iter().enumerate() {
            let at = i * 2 * plane;
            let od = Mask::from_probabilities(*h, *w, &probs.data()[at..at + plane])?;
            let oc = Mask::from_probabilities(*h, *w, &probs.data()[at + plane..at + 2 * plane])?;
            out.push((od, oc));
        }
    }
    Ok(out)
}

/// Mean Dice per domain over the given samples.
pub fn evaluate(model: &Model, samples: &[&Sample]) -> Result<BTreeMap<String, DomainDice>> {
    evaluate_with(model, samples, &InferHooks::default())
}

pub fn evaluate_with(model: &Model, samples: &[&Sample], hooks: &InferHooks) -> Result<BTreeMap<String, DomainDice>> {
    if samples.is_empty() {
        return Err(Error::Dataset("nothing to evaluate".into()));
    }
    let preds = predict_masks(model, samples, hooks)?;
    let mut sums: BTreeMap<String, (f64, f64, usize)> = BTreeMap::new();
    for (s, (od, oc)) in samples.iter().zip(&preds) {
        let e = sums.entry(s.domain.clone()).or_default();
        e.0 += dice(od, &s.mask_od)?;
        e.1 += dice(oc, &s.mask_oc)?;
        e.2 += 1;
    }
    Ok(sums
        .into_iter()
        .map(|(d, (od, oc, n))| {
            (
                d,
                DomainDice {
                    od: od / n as f64,
                    oc: oc / n as f64,
                },
            )
        })
        .collect())
}

/// Mean of the per-domain `(OD + OC) / 2` scores.
pub fn average_dice(scores: &BTreeMap<String, DomainDice>) -> f64 {
    scores.values().map(DomainDice::mean).sum::<f64>() / scores.len().max(1) as f64
}

/// Summed L1 distances between eval-mode projections of the source and
/// augmented views: `(style, structure)`.
pub fn projection_distances(model: &Model, source: &[&Sample], augmented: &[Sample]) -> Result<(f64, f64)> {
    if source.len() != augmented.len() || source.is_empty() {
        return Err(Error::InvalidArgument("projection_distances needs equal, non-empty batches".into()));
    }
    let n = source.len();
    let images = images_to_tensor(source.iter().map(|s| &s.image).chain(augmented.iter().map(|s| &s.image)))?;
    let net = &model.net;
    let mut f = Forward::eval(&model.store, &model.stats);
    let x = f.input(images)?;
    let feat = net.stem.forward(&mut f, x)?;
    let (sty, st) = if net.arch.cfd {
        let p = cfd::disentangle(&mut f, feat, &net.prompt)?;
        (p.style, p.structure)
    } else {
        let zero = f.input(Tensor::zeros(f.graph.dims(feat)))?;
        (zero, feat)
    };
    let mut dist = |v| -> Result<f64> {
        let p = net.projector.forward(&mut f, v)?;
        let a = f.graph.narrow_batch(p, 0, n)?;
        let b = f.graph.narrow_batch(p, n, n)?;
        let d = f.graph.sub(a, b)?;
        let s = f.graph.abs_sum(d)?;
        Ok(f.value(s).item())
    };
    Ok((dist(sty)?, dist(st)?))
}

/// Per-sample random streams for one step.
pub fn sample_streams(seed: u64, tag: u64, epoch: usize, indices: &[usize]) -> Vec<StreamRng> {
    indices
        .iter()
        .map(|&i| stream(seed, &[tag, epoch as u64, i as u64]))
        .collect()
}

/// Source batch after spatial augmentation, and its style counterpart.
pub fn prepare_batch(
    cfg: &TrainConfig,
    aug: &AugConfig,
    pool: &[&Sample],
    indices: &[usize],
    epoch: usize,
    mode: Option<StyleMode>,
) -> Result<(Vec<Sample>, Option<Vec<Sample>>)> {
    let source: Vec<Sample> = if aug.enable_spatial {
        let mut rngs = sample_streams(cfg.seed, purpose::SPATIAL, epoch, indices);
        indices
            .iter()
            .zip(&mut rngs)
            .map(|(&i, r)| spatial_augment(pool[i], aug, r))
            .collect()
    } else {
        indices.iter().map(|&i| pool[i].clone()).collect()
    };
    let styled = match mode {
        Some(m) => {
            let mut rngs = sample_streams(cfg.seed, purpose::STYLE, epoch, indices);
            Some(make_style_batch(&source, m, aug, &mut rngs)?)
        }
        None => None,
    };
    Ok((source, styled))
}

/// Shuffled sample order of one epoch.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, &[purpose::SHUFFLE, epoch as u64]));
    order
}

/// Where a finished run left its artifacts.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub best_epoch: Option<usize>,
    pub best_score: Option<f64>,
    pub final_scores: BTreeMap<String, DomainDice>,
    pub steps: usize,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// Source training pool and target evaluation pools.
pub fn training_pools<'a>(cfg: &TrainConfig, data: &'a Dataset) -> Result<(Vec<&'a Sample>, Vec<&'a Sample>)> {
    let pick = |domain: &str, split: Split| {
        let s = data.split(domain, split);
        if s.is_empty() {
            data.domain(domain)
        } else {
            s
        }
    };
    let train = pick(&cfg.source, Split::Train);
    if train.is_empty() {
        return Err(Error::Dataset(format!("source domain {:?} has no samples", cfg.source)));
    }
    let mut targets = Vec::new();
    for t in &cfg.targets {
        let s = pick(t, Split::Test);
        if s.is_empty() {
            return Err(Error::Dataset(format!("target domain {t:?} has no samples")));
        }
        targets.extend(s);
    }
    Ok((train, targets))
}

/// Full training run on `cfg.data_root`.
pub fn train(cfg: &TrainConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let data = load_dataset(&cfg.data_root)?;
    train_on(cfg, &data)
}

/// Full training run on an in-memory dataset; writes `final.ckpt`,
/// `best.ckpt` and `metrics.csv` under `cfg.out_dir`.
pub fn train_on(cfg: &TrainConfig, data: &Dataset) -> Result<RunOutput> {
    cfg.validate()?;
    let aug = cfg.aug();
    let (pool, targets) = training_pools(cfg, data)?;
    let h = pool[0].height();
    let w = pool[0].width();
    cfg.arch().check_input(h, w)?;

    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io_error(&cfg.out_dir, e))?;
    let metrics_path = cfg.out_dir.join("metrics.csv");
    let final_path = cfg.out_dir.join("final.ckpt");
    let best_path = cfg.out_dir.join("best.ckpt");
    let mut metrics = std::fs::File::create(&metrics_path).map_err(|e| Error::io_error(&metrics_path, e))?;
    let mut log = |line: &str| -> Result<()> { writeln!(metrics, "{line}").map_err(|e| Error::io_error(&metrics_path, e)) };
    log(METRICS_HEADER)?;

    let mut state = ModelState::new(cfg.arch(), cfg.seed, cfg.momentum)?;
    let modes = aug.modes();
    let mut step = 0usize;
    let mut best: Option<(usize, f64)> = None;
    let mut final_scores = BTreeMap::new();
    for epoch in 0..cfg.epochs {
        state.epoch = epoch;
        let lr = poly_lr(epoch, cfg.lr0, cfg.epochs)?;
        let order = epoch_order(cfg.seed, epoch, pool.len());
        for indices in order.chunks(cfg.batch_size) {
            let mode = (!modes.is_empty()).then(|| modes[step % modes.len()]);
            let (source, styled) = prepare_batch(cfg, &aug, &pool, indices, epoch, mode)?;
            let r = train_step(&mut state, &source, styled.as_deref(), lr, cfg.style_margin)?;
            let mut line = String::new();
            write!(line, "{epoch},{step},{lr},{},{},{},,,", r.l_seg, fmt_opt(r.l_str), fmt_opt(r.l_sty)).expect("string write");
            log(&line)?;
            step += 1;
        }
        state.epoch = epoch + 1;
        let last = epoch + 1 == cfg.epochs;
        if (epoch + 1) % cfg.eval_every == 0 || last {
            let scores = if targets.is_empty() { BTreeMap::new() } else { evaluate(&state.model, &targets)? };
            for (d, s) in &scores {
                log(&format!("{epoch},,,,,,{d},{},{}", s.od, s.oc))?;
            }
            let avg = average_dice(&scores);
            if best.is_none_or(|(_, b)| avg > b) {
                best = Some((epoch, avg));
                state.save(&best_path)?;
            }
            final_scores = scores;
        }
    }
    state.save(&final_path)?;
    Ok(RunOutput {
        final_checkpoint: final_path,
        best_checkpoint: best_path,
        metrics: metrics_path,
        best_epoch: best.map(|b| b.0),
        best_score: best.map(|b| b.1),
        final_scores,
        steps: step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poly_lr_values() {
        assert_eq!(poly_lr(0, 0.01, 100).unwrap(), 0.01);
        assert_eq!(poly_lr(100, 0.01, 100).unwrap(), 0.0);
        assert!((poly_lr(50, 0.01, 100).unwrap() - 0.0053589).abs() < 1e-7);
        assert!(poly_lr(101, 0.01, 100).is_err());
    }

    #[test]
    fn dice_cases() {
        let m = |v: &[u8]| Mask::new(1, v.len(), v.to_vec()).unwrap();
        assert_eq!(dice(&m(&[1, 1, 0]), &m(&[1, 1, 0])).unwrap(), 100.0);
        assert_eq!(dice(&m(&[1, 0, 0]), &m(&[0, 1, 0])).unwrap(), 0.0);
        assert_eq!(dice(&m(&[0, 0]), &m(&[0, 0])).unwrap(), 100.0);
        assert_eq!(dice(&m(&[1, 1, 1, 1, 0, 0]), &m(&[0, 0, 1, 1, 1, 1])).unwrap(), 50.0);
        assert!(dice_raw(&[2], &[1]).is_err());
        assert!(dice(&m(&[1]), &m(&[1, 0])).is_err());
    }

    #[test]
    fn config_rejects_unknown_keys() {
        assert!(serde_json::from_str::<TrainConfig>(r#"{"lr": 0.1}"#).is_err());
        let c: TrainConfig = serde_json::from_str(r#"{"lr0": 0.1}"#).unwrap();
        assert_eq!(c.lr0, 0.1);
        assert_eq!(c.epochs, 30);
    }
}
