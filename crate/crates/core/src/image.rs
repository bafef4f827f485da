//! Planar RGB images, binary masks and labelled samples.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Planar (channel-major) image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 || data.len() != channels * height * width {
            return Err(Error::shape(
                "image",
                format!("{channels}x{height}x{width} with {} values", data.len()),
            ));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self::new(channels, height, width, vec![value; channels * height * width]).expect("non-empty")
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn same_dims(&self, other: &Image) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    pub fn ensure_unit_range(&self, what: &str) -> Result<()> {
        match self.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            None => Ok(()),
            Some(v) => Err(Error::InvalidArgument(format!("{what}: value {v} outside [0, 1]"))),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    pub fn map_indexed(&self, f: impl Fn(usize, f64) -> f64) -> Image {
        Image {
            data: self.data.iter().enumerate().map(|(i, &v)| f(i, v)).collect(),
            ..self.clone()
        }
    }

    /// Per-image, per-channel standardization to zero mean and unit variance.
    pub fn standardized(&self) -> Vec<f64> {
        let n = (self.height * self.width) as f64;
        let mut out = Vec::with_capacity(self.data.len());
        for c in 0..self.channels {
            let p = self.plane(c);
            let mean = p.iter().sum::<f64>() / n;
            let var = p.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let std = var.sqrt().max(1e-6);
            out.extend(p.iter().map(|v| (v - mean) / std));
        }
        out
    }
}

/// Binary `{0, 1}` mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::shape("mask", format!("{height}x{width} with {} values", data.len())));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::InvalidArgument(format!("mask value {v} is not binary")));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::new(height, width, vec![0; height * width]).expect("non-empty")
    }

    /// Thresholds probabilities at 0.5 (inclusive).
    pub fn from_probabilities(height: usize, width: usize, probs: &[f64]) -> Result<Self> {
        Self::new(height, width, probs.iter().map(|&p| (p >= 0.5) as u8).collect())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }
}

/// One labelled image: optic disc and optic cup masks plus provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub mask_od: Mask,
    pub mask_oc: Mask,
    pub domain: String,
    pub id: String,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.height()
    }

    pub fn width(&self) -> usize {
        self.image.width()
    }
}

/// Stacks standardized images into an `N x C x H x W` tensor.
pub fn images_to_tensor<'a>(images: impl IntoIterator<Item = &'a Image>) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut dims: Option<[usize; 3]> = None;
    let mut n = 0;
    for img in images {
        let d = [img.channels(), img.height(), img.width()];
        match dims {
            None => dims = Some(d),
            Some(prev) if prev != d => {
                return Err(Error::shape("images_to_tensor", format!("{prev:?} vs {d:?}")));
            }
            _ => {}
        }
        data.extend(img.standardized());
        n += 1;
    }
    let [c, h, w] = dims.ok_or_else(|| Error::InvalidArgument("empty image batch".into()))?;
    Tensor::new(&[n, c, h, w], data)
}

/// Stacks the OD and OC masks into an `N x 2 x H x W` target tensor.
pub fn masks_to_tensor<'a>(samples: impl IntoIterator<Item = &'a Sample>) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut n = 0;
    let mut hw = None;
    for s in samples {
        let d = (s.mask_od.height(), s.mask_od.width());
        if *hw.get_or_insert(d) != d {
            return Err(Error::shape("masks_to_tensor", "mixed mask sizes"));
        }
        data.extend(s.mask_od.to_f64());
        data.extend(s.mask_oc.to_f64());
        n += 1;
    }
    let (h, w) = hw.ok_or_else(|| Error::InvalidArgument("empty mask batch".into()))?;
    Tensor::new(&[n, 2, h, w], data)
}
