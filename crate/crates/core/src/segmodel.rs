//! Stem convolution, U-shaped segmentation backbone, segmentation losses
//! and the composite network with hooked inference.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cfd::{self, ChannelPrompt, PromptInit, Projector};
use crate::error::{Error, Result};
use crate::graph::{Var, BCE_EPS};
use crate::nn::{Conv2d, DoubleConv, Forward, StatsMap};
use crate::params::{ParamId, ParamStore};
use crate::rng::{purpose, stream};
use crate::tensor::Tensor;

/// Output classes: optic disc, optic cup.
pub const CLASSES: usize = 2;

/// Architecture hyper-parameters; stored in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Arch {
    /// Stem output width `C` (also the prompt width).
    pub channels: usize,
    /// Number of pooling levels in the backbone.
    pub depth: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    pub tau: f64,
    pub prompt_init: PromptInit,
    /// When false the backbone sees the raw stem output.
    pub cfd: bool,
}

impl Default for Arch {
    fn default() -> Self {
        Self {
            channels: 32,
            depth: 3,
            stem_kernel: 3,
            stem_stride: 1,
            tau: cfd::DEFAULT_TAU,
            prompt_init: PromptInit::Random,
            cfd: true,
        }
    }
}

impl Arch {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::Config("channels must be at least 1".into()));
        }
        if self.stem_kernel == 0 || self.stem_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("stem_kernel must be odd, got {}", self.stem_kernel)));
        }
        if !self.stem_stride.is_power_of_two() {
            return Err(Error::Config(format!("stem_stride must be a power of two, got {}", self.stem_stride)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if self.depth > 8 {
            return Err(Error::Config(format!("depth {} is unreasonably large", self.depth)));
        }
        Ok(())
    }

    /// Input height/width must be a multiple of this.
    pub fn size_multiple(&self) -> usize {
        self.stem_stride << self.depth
    }

    pub fn check_input(&self, height: usize, width: usize) -> Result<()> {
        let m = self.size_multiple();
        if !height.is_multiple_of(m) || !width.is_multiple_of(m) || height == 0 || width == 0 {
            return Err(Error::shape(
                "segment",
                format!("spatial dims {height}x{width} not divisible by {m}"),
            ));
        }
        Ok(())
    }
}

/// First convolution: `3 -> C`, kernel `k`, stride `s`, "same" padding, bias.
#[derive(Clone, Debug)]
pub struct Stem {
    pub conv: Conv2d,
}

impl Stem {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, arch: &Arch) -> Self {
        let k = arch.stem_kernel;
        Self {
            conv: Conv2d::new(store, rng, "stem", 3, arch.channels, k, arch.stem_stride, k / 2, true),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.conv.params()
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let d = f.graph.dims(x);
        if d.len() != 4 || d[1] != 3 {
            return Err(Error::shape("stem", format!("expected N x 3 x H x W, got {d:?}")));
        }
        self.conv.forward(f, x)
    }
}

/// Double-conv U-Net: `depth` pooling levels with widths `C * 2^d`.
#[derive(Clone, Debug)]
pub struct UNet {
    pub encoders: Vec<DoubleConv>,
    pub bottleneck: DoubleConv,
    /// `decoders[d]` merges the skip of level `d`.
    pub decoders: Vec<DoubleConv>,
    pub head: Conv2d,
}

impl UNet {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, stats: &mut StatsMap, rng: &mut R, channels: usize, depth: usize) -> Self {
        let width = |d: usize| channels << d;
        let mut encoders = Vec::with_capacity(depth);
        for d in 0..depth {
            let cin = if d == 0 { channels } else { width(d - 1) };
            encoders.push(DoubleConv::new(store, stats, rng, &format!("enc{d}"), cin, width(d)));
        }
        let bin = if depth == 0 { channels } else { width(depth - 1) };
        let bottleneck = DoubleConv::new(store, stats, rng, "bottleneck", bin, width(depth));
        let mut decoders: Vec<DoubleConv> = (0..depth)
            .rev()
            .map(|d| DoubleConv::new(store, stats, rng, &format!("dec{d}"), width(d + 1) + width(d), width(d)))
            .collect();
        decoders.reverse();
        let head = Conv2d::new(store, rng, "head", width(0), CLASSES, 1, 1, 0, true);
        Self {
            encoders,
            bottleneck,
            decoders,
            head,
        }
    }

    pub fn depth(&self) -> usize {
        self.encoders.len()
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut out: Vec<ParamId> = self.encoders.iter().flat_map(DoubleConv::params).collect();
        out.extend(self.bottleneck.params());
        out.extend(self.decoders.iter().flat_map(DoubleConv::params));
        out.extend(self.head.params());
        out
    }

    /// Logits (`N x 2 x H x W`) from `N x C x H x W` features.
    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let d = f.graph.dims(x).to_vec();
        let m = 1usize << self.depth();
        if d.len() != 4 || !d[2].is_multiple_of(m) || !d[3].is_multiple_of(m) {
            return Err(Error::shape("unet", format!("input {d:?} not divisible by {m}")));
        }
        let mut skips = Vec::with_capacity(self.depth());
        let mut h = x;
        for enc in &self.encoders {
            let s = enc.forward(f, h)?;
            skips.push(s);
            h = f.graph.max_pool2d(s)?;
        }
        h = self.bottleneck.forward(f, h)?;
        for (dec, skip) in self.decoders.iter().zip(skips).rev() {
            let up = f.graph.upsample_nearest(h)?;
            let cat = f.graph.concat_channels(&[skip, up])?;
            h = dec.forward(f, cat)?;
        }
        self.head.forward(f, h)
    }
}

/// Mean binary cross-entropy of probabilities against binary targets.
pub fn bce_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.dims() != target.dims() {
        return Err(Error::shape("bce_loss", format!("{:?} vs {:?}", pred.dims(), target.dims())));
    }
    let total: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &y)| {
            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / pred.numel() as f64)
}

/// Sum of the source-view and augmented-view losses against the same labels.
pub fn seg_loss_total(pred_source: &Tensor, pred_aug: &Tensor, target: &Tensor) -> Result<f64> {
    Ok(bce_loss(pred_source, target)? + bce_loss(pred_aug, target)?)
}

/// Where a dropped channel is zeroed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropPoint {
    /// Stem output, before the prompt masks.
    #[default]
    PreMask,
    /// Structure features, after masking.
    PostMask,
}

impl std::str::FromStr for DropPoint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pre" | "pre_mask" => Ok(DropPoint::PreMask),
            "post" | "post_mask" => Ok(DropPoint::PostMask),
            _ => Err(Error::InvalidArgument(format!("unknown drop point {s:?}"))),
        }
    }
}

/// Interventions on the shallow features during inference.
#[derive(Clone, Debug, Default)]
pub struct InferHooks {
    pub drop_channel: Option<(usize, DropPoint)>,
    /// Adds channel `i` of the style part back into the structure part.
    pub add_style_channel: Option<usize>,
    /// Added to the style part after disentanglement.
    pub style_perturbation: Option<Tensor>,
}

/// Shallow features of one batch.
#[derive(Clone, Debug)]
pub struct ShallowFeatures {
    pub full: Tensor,
    pub style: Tensor,
    pub structure: Tensor,
}

fn zero_channel(t: &mut Tensor, channel: usize) {
    let d = t.dims().to_vec();
    let plane = d[2] * d[3];
    for n in 0..d[0] {
        let at = (n * d[1] + channel) * plane;
        t.data_mut()[at..at + plane].fill(0.0);
    }
}

fn add_channel(dst: &mut Tensor, src: &Tensor, channel: usize) {
    let d = dst.dims().to_vec();
    let plane = d[2] * d[3];
    for n in 0..d[0] {
        let at = (n * d[1] + channel) * plane;
        let s = &src.data()[at..at + plane];
        dst.data_mut()[at..at + plane].iter_mut().zip(s).for_each(|(a, b)| *a += b);
    }
}

/// Layer layout: stem, channel prompt, backbone and projector.
#[derive(Clone, Debug)]
pub struct Network {
    pub arch: Arch,
    pub stem: Stem,
    pub prompt: ChannelPrompt,
    pub backbone: UNet,
    pub projector: Projector,
}

impl Network {
    pub fn build<R: Rng + ?Sized>(arch: Arch, store: &mut ParamStore, stats: &mut StatsMap, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let stem = Stem::new(store, rng, &arch);
        let prompt = ChannelPrompt::new(store, rng, arch.channels, arch.tau, arch.prompt_init);
        let backbone = UNet::new(store, stats, rng, arch.channels, arch.depth);
        let projector = Projector::new(store, stats, rng, arch.channels);
        Ok(Self {
            arch,
            stem,
            prompt,
            backbone,
            projector,
        })
    }

    pub fn stem_params(&self) -> Vec<ParamId> {
        self.stem.params()
    }

    pub fn backbone_params(&self) -> Vec<ParamId> {
        self.backbone.params()
    }

    pub fn projector_params(&self) -> Vec<ParamId> {
        self.projector.params()
    }

    /// Logits back at the stem's input resolution, through the sigmoid.
    fn head_to_probs(&self, f: &mut Forward, logits: Var) -> Result<Var> {
        let mut h = logits;
        let mut s = self.arch.stem_stride;
        while s > 1 {
            h = f.graph.upsample_nearest(h)?;
            s /= 2;
        }
        f.graph.sigmoid(h)
    }

    /// Structure features that feed the backbone.
    pub fn structure_features(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let d = f.graph.dims(x);
        if d.len() == 4 {
            self.arch.check_input(d[2], d[3])?;
        }
        let feat = self.stem.forward(f, x)?;
        if self.arch.cfd {
            Ok(cfd::disentangle(f, feat, &self.prompt)?.structure)
        } else {
            Ok(feat)
        }
    }

    /// Probabilities for a standardized `N x 3 x H x W` batch on the tape.
    pub fn segment(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let st = self.structure_features(f, x)?;
        self.segment_features(f, st)
    }

    /// Backbone, head and sigmoid on structure features.
    pub fn segment_features(&self, f: &mut Forward, structure: Var) -> Result<Var> {
        let logits = self.backbone.forward(f, structure)?;
        self.head_to_probs(f, logits)
    }
}

/// A network together with its parameter values and batch-norm statistics.
#[derive(Clone, Debug)]
pub struct Model {
    pub net: Network,
    pub store: ParamStore,
    pub stats: StatsMap,
}

impl Model {
    pub fn new(arch: Arch, seed: u64) -> Result<Self> {
        let mut rng = stream(seed, &[purpose::INIT]);
        let mut store = ParamStore::new();
        let mut stats = StatsMap::new();
        let net = Network::build(arch, &mut store, &mut stats, &mut rng)?;
        Ok(Self { net, store, stats })
    }

    pub fn arch(&self) -> &Arch {
        &self.net.arch
    }

    /// Current `(style, structure)` prompt masks; with CFD off everything
    /// is structure.
    pub fn masks(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        if self.net.arch.cfd {
            self.net.prompt.masks(&self.store)
        } else {
            let c = self.net.arch.channels;
            Ok((vec![0.0; c], vec![1.0; c]))
        }
    }

    /// Stem output and its split, evaluated without gradients.
    pub fn shallow_features(&self, images: &Tensor) -> Result<ShallowFeatures> {
        let d = images.dims();
        if d.len() != 4 {
            return Err(Error::shape("shallow_features", format!("expected N x 3 x H x W, got {d:?}")));
        }
        self.net.arch.check_input(d[2], d[3])?;
        let mut f = Forward::eval(&self.store, &self.stats);
        let x = f.input(images.clone())?;
        let feat = self.net.stem.forward(&mut f, x)?;
        let full = f.value(feat).clone();
        let (sty_mask, str_mask) = self.masks()?;
        let (style, structure) = cfd::split_features(&full, &sty_mask, &str_mask)?;
        Ok(ShallowFeatures { full, style, structure })
    }

    /// Eval-mode probabilities (`N x 2 x H x W`) with optional feature
    /// interventions.
    pub fn infer(&self, images: &Tensor, hooks: &InferHooks) -> Result<Tensor> {
        let c = self.net.arch.channels;
        for ch in hooks.drop_channel.map(|(i, _)| i).into_iter().chain(hooks.add_style_channel) {
            if ch >= c {
                return Err(Error::InvalidArgument(format!("channel {ch} out of range for width {c}")));
            }
        }
        let mut feats = self.shallow_features(images)?;
        match hooks.drop_channel {
            Some((i, DropPoint::PreMask)) => {
                zero_channel(&mut feats.full, i);
                let (sty_mask, str_mask) = self.masks()?;
                let (s, t) = cfd::split_features(&feats.full, &sty_mask, &str_mask)?;
                feats.style = s;
                feats.structure = t;
            }
            Some((i, DropPoint::PostMask)) => zero_channel(&mut feats.structure, i),
            None => {}
        }
        if let Some(i) = hooks.add_style_channel {
            add_channel(&mut feats.structure, &feats.style, i);
        }
        if let Some(p) = &hooks.style_perturbation {
            if p.dims() != feats.style.dims() {
                return Err(Error::shape("style_perturbation", format!("{:?} vs {:?}", p.dims(), feats.style.dims())));
            }
            feats.style.data_mut().iter_mut().zip(p.data()).for_each(|(a, b)| *a += b);
        }
        self.segment_structure(&feats.structure)
    }

    /// Backbone and head on given structure features, eval mode.
    pub fn segment_structure(&self, structure: &Tensor) -> Result<Tensor> {
        let mut f = Forward::eval(&self.store, &self.stats);
        let st = f.input(structure.clone())?;
        let probs = self.net.segment_features(&mut f, st)?;
        Ok(f.value(probs).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_arch() -> Arch {
        Arch {
            channels: 4,
            depth: 2,
            ..Arch::default()
        }
    }

    fn images(n: usize, hw: usize, seed: u64) -> Tensor {
        Tensor::randn(&[n, 3, hw, hw], 1.0, &mut stream(seed, &[]))
    }

    #[test]
    fn bce_hand_cases() {
        let half = Tensor::full(&[1, 2, 1, 1], 0.5);
        let ones = Tensor::full(&[1, 2, 1, 1], 1.0);
        assert!((bce_loss(&half, &ones).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        let s = Tensor::new(&[1], vec![0.5]).unwrap();
        let a = Tensor::new(&[1], vec![0.25]).unwrap();
        let y = Tensor::new(&[1], vec![1.0]).unwrap();
        let total = seg_loss_total(&s, &a, &y).unwrap();
        assert!((total - (2f64.ln() + 4f64.ln())).abs() < 1e-12);
        assert!((total - 2.0794).abs() < 1e-4);
    }

    #[test]
    fn bce_label_flip_symmetry() {
        let p = Tensor::rand_uniform(&[2, 2, 3, 3], 0.01, 0.99, &mut stream(5, &[]));
        let y = Tensor::from_fn(&[2, 2, 3, 3], |i| (i % 3 == 0) as u8 as f64);
        let a = bce_loss(&p, &y).unwrap();
        let b = bce_loss(&p.map(|v| 1.0 - v), &y.map(|v| 1.0 - v)).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert!(bce_loss(&p, &Tensor::zeros(&[2, 2])).is_err());
    }

    #[test]
    fn output_shape_and_range() {
        let net = Model::new(tiny_arch(), 1).unwrap();
        let p = net.infer(&images(2, 8, 2), &InferHooks::default()).unwrap();
        assert_eq!(p.dims(), &[2, 2, 8, 8]);
        assert!(p.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn strided_stem_restores_resolution() {
        let arch = Arch {
            stem_stride: 2,
            ..tiny_arch()
        };
        let net = Model::new(arch, 1).unwrap();
        let p = net.infer(&images(1, 16, 2), &InferHooks::default()).unwrap();
        assert_eq!(p.dims(), &[1, 2, 16, 16]);
        assert!(net.infer(&images(1, 12, 2), &InferHooks::default()).is_err());
    }

    #[test]
    fn eval_is_deterministic() {
        let net = Model::new(tiny_arch(), 3).unwrap();
        let x = images(2, 8, 4);
        let a = net.infer(&x, &InferHooks::default()).unwrap();
        let b = net.infer(&x, &InferHooks::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn indivisible_dims_error() {
        let net = Model::new(tiny_arch(), 3).unwrap();
        assert!(net.infer(&images(1, 6, 4), &InferHooks::default()).is_err());
    }

    #[test]
    fn style_perturbation_has_no_effect() {
        let net = Model::new(tiny_arch(), 5).unwrap();
        let x = images(2, 8, 6);
        let base = net.infer(&x, &InferHooks::default()).unwrap();
        let hooks = InferHooks {
            style_perturbation: Some(Tensor::randn(&[2, 4, 8, 8], 10.0, &mut stream(7, &[]))),
            ..Default::default()
        };
        assert_eq!(net.infer(&x, &hooks).unwrap(), base);
    }

    #[test]
    fn full_structure_prompt_equals_plain_pipeline() {
        let mut net = Model::new(tiny_arch(), 8).unwrap();
        let logits = Tensor::from_fn(&[2, 4], |i| if i < 4 { -1e3 } else { 1e3 });
        net.store.set(net.net.prompt.logits, logits).unwrap();
        let x = images(1, 8, 9);
        let masked = net.infer(&x, &InferHooks::default()).unwrap();
        let feats = net.shallow_features(&x).unwrap();
        assert_eq!(net.segment_structure(&feats.full).unwrap(), masked);
    }

    #[test]
    fn hooks_reject_bad_channel() {
        let net = Model::new(tiny_arch(), 8).unwrap();
        let hooks = InferHooks {
            drop_channel: Some((4, DropPoint::PreMask)),
            ..Default::default()
        };
        assert!(net.infer(&images(1, 8, 1), &hooks).is_err());
    }

    #[test]
    fn adding_a_channel_back_restores_it() {
        let mut net = Model::new(tiny_arch(), 10).unwrap();
        // channel 0 pure style, others pure structure
        let logits = Tensor::from_fn(&[2, 4], |i| match i {
            0 => 1e3,
            4 => -1e3,
            _ if i < 4 => -1e3,
            _ => 1e3,
        });
        net.store.set(net.net.prompt.logits, logits).unwrap();
        let x = images(1, 8, 11);
        let added = net
            .infer(&x, &InferHooks { add_style_channel: Some(0), ..Default::default() })
            .unwrap();
        let feats = net.shallow_features(&x).unwrap();
        assert_eq!(net.segment_structure(&feats.full).unwrap(), added);
    }

    #[test]
    fn decoder_levels_match_skips() {
        let net = Model::new(Arch { channels: 2, depth: 3, ..Arch::default() }, 0).unwrap();
        let p = net.infer(&images(1, 16, 0), &InferHooks::default()).unwrap();
        assert_eq!(p.dims(), &[1, 2, 16, 16]);
    }
}
