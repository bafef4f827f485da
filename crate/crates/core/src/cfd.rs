//! Channel-level feature disentanglement: the learnable channel prompt,
//! the projector and the paired contrastive losses.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::nn::{BatchNorm2d, Conv2d, Forward, Linear, StatsMap};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const DEFAULT_TAU: f64 = 0.1;
pub const PROJECTION_DIM: usize = 1024;
/// Row of the prompt holding style logits; the other row holds structure.
pub const STYLE_ROW: usize = 0;
pub const STRUCTURE_ROW: usize = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptInit {
    /// Logits from `Normal(0, 0.01)`.
    #[default]
    Random,
    /// Structure logits 1, style logits 0.
    OneZero,
}

/// Learnable `2 x C` logit matrix.
#[derive(Clone, Debug)]
pub struct ChannelPrompt {
    pub logits: ParamId,
    pub tau: f64,
}

impl ChannelPrompt {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, channels: usize, tau: f64, init: PromptInit) -> Self {
        let value = match init {
            PromptInit::Random => Tensor::randn(&[2, channels], 0.01, rng),
            PromptInit::OneZero => Tensor::from_fn(&[2, channels], |i| (i / channels == STRUCTURE_ROW) as u8 as f64),
        };
        Self {
            logits: store.insert("prompt.logits", value),
            tau,
        }
    }

    pub fn channels(&self, store: &ParamStore) -> usize {
        store.get(self.logits).dims()[1]
    }

    /// Current `(style, structure)` masks.
    pub fn masks(&self, store: &ParamStore) -> Result<(Vec<f64>, Vec<f64>)> {
        prompt_masks(store.get(self.logits), self.tau)
    }

    /// Differentiable masks on the tape, as `C`-vectors `(style, structure)`.
    pub fn forward(&self, f: &mut Forward) -> Result<(Var, Var)> {
        check_tau(self.tau)?;
        let p = f.param(self.logits)?;
        let scaled = f.graph.scale(p, 1.0 / self.tau)?;
        let soft = f.graph.softmax(scaled, 0)?;
        let sty = f.graph.select_row(soft, STYLE_ROW)?;
        let st = f.graph.select_row(soft, STRUCTURE_ROW)?;
        Ok((sty, st))
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")))
    }
}

/// Column-wise softmax of `logits / tau` for a `2 x C` matrix.
pub fn prompt_masks(logits: &Tensor, tau: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    check_tau(tau)?;
    let d = logits.dims();
    if d.len() != 2 || d[0] != 2 {
        return Err(Error::shape("prompt_masks", format!("expected 2 x C, got {d:?}")));
    }
    let c = d[1];
    let (sty_row, str_row) = logits.data().split_at(c);
    Ok(sty_row
        .iter()
        .zip(str_row)
        .map(|(&a, &b)| {
            // softmax over two entries is a sigmoid of the scaled gap
            let s = crate::graph::sigmoid((a - b) / tau);
            let t = crate::graph::sigmoid((b - a) / tau);
            (s, t)
        })
        .unzip())
}

/// Disentangled shallow features on the tape.
#[derive(Clone, Copy, Debug)]
pub struct Parts {
    pub style: Var,
    pub structure: Var,
}

/// Scales every channel of `features` by the style and structure masks.
pub fn disentangle(f: &mut Forward, features: Var, prompt: &ChannelPrompt) -> Result<Parts> {
    let c = f.graph.dims(features).get(1).copied().unwrap_or(0);
    let logits = f.param(prompt.logits)?;
    let width = f.graph.dims(logits)[1];
    if c != width {
        return Err(Error::shape("disentangle", format!("{c} feature channels vs prompt width {width}")));
    }
    let (sty, st) = prompt.forward(f)?;
    Ok(Parts {
        style: f.graph.mul_channel(features, sty)?,
        structure: f.graph.mul_channel(features, st)?,
    })
}

/// Tensor-level split of `features` (`N x C x H x W`) with fixed masks.
pub fn split_features(features: &Tensor, style_mask: &[f64], structure_mask: &[f64]) -> Result<(Tensor, Tensor)> {
    let d = features.dims();
    if d.len() != 4 || d[1] != style_mask.len() || d[1] != structure_mask.len() {
        return Err(Error::shape(
            "split_features",
            format!("features {d:?} with {} mask entries", style_mask.len()),
        ));
    }
    let plane = d[2] * d[3];
    let scaled = |mask: &[f64]| {
        let data = features
            .data()
            .chunks(plane)
            .enumerate()
            .flat_map(|(i, ch)| {
                let m = mask[i % d[1]];
                ch.iter().map(move |v| v * m)
            })
            .collect();
        Tensor::new(d, data)
    };
    Ok((scaled(style_mask)?, scaled(structure_mask)?))
}

/// `conv 3x3 stride 2 -> batch norm -> global max pool -> linear(1024)`.
#[derive(Clone, Debug)]
pub struct Projector {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    pub fc: Linear,
}

impl Projector {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, stats: &mut StatsMap, rng: &mut R, channels: usize) -> Self {
        Self::with_dim(store, stats, rng, channels, PROJECTION_DIM)
    }

    pub fn with_dim<R: Rng + ?Sized>(
        store: &mut ParamStore,
        stats: &mut StatsMap,
        rng: &mut R,
        channels: usize,
        dim: usize,
    ) -> Self {
        Self {
            conv: Conv2d::new(store, rng, "proj.conv", channels, channels, 3, 2, 1, false),
            bn: BatchNorm2d::new(store, stats, "proj.bn", channels),
            fc: Linear::new(store, rng, "proj.fc", channels, dim),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        [self.conv.params(), self.bn.params(), self.fc.params()].concat()
    }

    /// `N x C x H x W` features to `N x dim` projections.
    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let d = f.graph.dims(x).to_vec();
        if d.len() != 4 || d[2] < 3 || d[3] < 3 {
            return Err(Error::shape("projector", format!("needs N x C x H x W with H, W >= 3, got {d:?}")));
        }
        let h = self.conv.forward(f, x)?;
        let h = self.bn.forward(f, h)?;
        let h = f.graph.global_max_pool(h)?;
        self.fc.forward(f, h)
    }
}

/// Contrastive terms for one step.
#[derive(Clone, Copy, Debug)]
pub struct ContrastiveLosses {
    pub structure: Var,
    pub style: Var,
}

/// Structure projections of the source and augmented views are pulled
/// together (`sum |a - b|`), style projections pushed apart
/// (`-sum |a - b|`, or `max(0, margin - sum |a - b|)` with a margin).
pub fn contrastive_losses(
    f: &mut Forward,
    structure: (Var, Var),
    style: (Var, Var),
    style_margin: Option<f64>,
) -> Result<ContrastiveLosses> {
    for (a, b) in [structure, style] {
        if f.graph.dims(a) != f.graph.dims(b) {
            return Err(Error::shape(
                "contrastive_losses",
                format!("{:?} vs {:?}", f.graph.dims(a), f.graph.dims(b)),
            ));
        }
    }
    let d = f.graph.sub(structure.0, structure.1)?;
    let l_str = f.graph.abs_sum(d)?;
    let d = f.graph.sub(style.0, style.1)?;
    let dist = f.graph.abs_sum(d)?;
    let neg = f.graph.scale(dist, -1.0)?;
    let l_sty = match style_margin {
        None => neg,
        Some(m) => {
            let gap = f.graph.shift(neg, m)?;
            f.graph.relu(gap)?
        }
    };
    Ok(ContrastiveLosses {
        structure: l_str,
        style: l_sty,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn symmetric_logits_give_half() {
        let (s, t) = prompt_masks(&Tensor::zeros(&[2, 3]), 0.1).unwrap();
        assert!(s.iter().chain(&t).all(|&v| v == 0.5));
    }

    #[test]
    fn gap_twenty_closed_form() {
        let p = Tensor::new(&[2, 1], vec![1.0, -1.0]).unwrap();
        let (s, t) = prompt_masks(&p, 0.1).unwrap();
        let small = 1.0 / (1.0 + 20f64.exp());
        assert!((t[0] - small).abs() < 1e-12);
        assert!((s[0] - (1.0 - small)).abs() < 1e-12);
        assert!((t[0] - 2.06e-9).abs() < 5e-12);
    }

    #[test]
    fn rejects_bad_tau() {
        assert!(prompt_masks(&Tensor::zeros(&[2, 2]), 0.0).is_err());
        assert!(prompt_masks(&Tensor::zeros(&[2, 2]), -1.0).is_err());
    }

    #[test]
    fn one_zero_init_favours_structure() {
        let mut store = ParamStore::new();
        let p = ChannelPrompt::new(&mut store, &mut stream(0, &[]), 4, 0.1, PromptInit::OneZero);
        let (s, t) = p.masks(&store).unwrap();
        assert!(t.iter().all(|&v| v > 0.9999));
        assert!(s.iter().all(|&v| v < 1e-4));
    }

    #[test]
    fn graph_masks_match_closed_form() {
        let mut store = ParamStore::new();
        let p = ChannelPrompt::new(&mut store, &mut stream(1, &[]), 5, 0.1, PromptInit::Random);
        let (s, t) = p.masks(&store).unwrap();
        let stats = StatsMap::new();
        let mut f = Forward::eval(&store, &stats);
        let (gs, gt) = p.forward(&mut f).unwrap();
        for i in 0..5 {
            assert!((f.value(gs).data()[i] - s[i]).abs() < 1e-12);
            assert!((f.value(gt).data()[i] - t[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn hand_built_l1_distance() {
        let store = ParamStore::new();
        let stats = StatsMap::new();
        let mut f = Forward::eval(&store, &stats);
        let a = f.input(Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap()).unwrap();
        let b = f.input(Tensor::new(&[1, 2], vec![3.0, 0.0]).unwrap()).unwrap();
        let l = contrastive_losses(&mut f, (a, b), (a, b), None).unwrap();
        assert_eq!(f.value(l.structure).item(), 4.0);
        assert_eq!(f.value(l.style).item(), -4.0);
        let l = contrastive_losses(&mut f, (a, b), (a, b), Some(10.0)).unwrap();
        assert_eq!(f.value(l.style).item(), 6.0);
        let l = contrastive_losses(&mut f, (a, b), (a, b), Some(3.0)).unwrap();
        assert_eq!(f.value(l.style).item(), 0.0);
    }

    #[test]
    fn projector_output_shape_and_small_input_error() {
        let mut store = ParamStore::new();
        let mut stats = StatsMap::new();
        let proj = Projector::new(&mut store, &mut stats, &mut stream(2, &[]), 4);
        let mut f = Forward::eval(&store, &stats);
        let x = f.input(Tensor::randn(&[3, 4, 6, 6], 1.0, &mut stream(3, &[]))).unwrap();
        let y = proj.forward(&mut f, x).unwrap();
        assert_eq!(f.graph.dims(y), &[3, PROJECTION_DIM]);
        let small = f.input(Tensor::zeros(&[1, 4, 2, 2])).unwrap();
        assert!(proj.forward(&mut f, small).is_err());
    }

    #[test]
    fn disentangle_rejects_channel_mismatch() {
        let mut store = ParamStore::new();
        let p = ChannelPrompt::new(&mut store, &mut stream(4, &[]), 3, 0.1, PromptInit::Random);
        let stats = StatsMap::new();
        let mut f = Forward::eval(&store, &stats);
        let x = f.input(Tensor::zeros(&[1, 4, 2, 2])).unwrap();
        assert!(disentangle(&mut f, x, &p).is_err());
    }
}
