//! Style augmentation (BA, SL, FR branches) and shared spatial augmentation.

mod fourier;
mod intensity;
mod spatial;

pub use fourier::{
    in_swap_region, low_freq_swap, low_freq_swap_cropped, low_freq_swap_unclamped, pow2_crop_box, swap_side,
};
pub use intensity::{
    add_gaussian_noise, bezier_transform, gamma_correct, gaussian_blur, gaussian_noise_field, BezierLut,
};
pub use spatial::{apply_spatial, spatial_augment, SpatialParams};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Sample;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugConfig {
    pub enable_ba: bool,
    pub enable_sl: bool,
    pub enable_fr: bool,
    pub enable_spatial: bool,
    pub gamma_range: [f64; 2],
    pub noise_sigma_range: [f64; 2],
    pub blur_sigma_range: [f64; 2],
    /// Half-open `(lo, hi]`.
    pub beta_range: [f64; 2],
    pub bezier_lut_size: usize,
    pub rotation_range_deg: [f64; 2],
    pub scale_range: [f64; 2],
    pub flip_prob: f64,
}

impl Default for AugConfig {
    fn default() -> Self {
        Self {
            enable_ba: true,
            enable_sl: true,
            enable_fr: true,
            enable_spatial: true,
            gamma_range: [0.5, 2.0],
            noise_sigma_range: [0.0, 0.1],
            blur_sigma_range: [0.0, 1.5],
            beta_range: [0.05, 0.15],
            bezier_lut_size: 1000,
            rotation_range_deg: [-15.0, 15.0],
            scale_range: [0.9, 1.1],
            flip_prob: 0.5,
        }
    }
}

impl AugConfig {
    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("gamma_range", self.gamma_range),
            ("noise_sigma_range", self.noise_sigma_range),
            ("blur_sigma_range", self.blur_sigma_range),
            ("beta_range", self.beta_range),
            ("rotation_range_deg", self.rotation_range_deg),
            ("scale_range", self.scale_range),
        ];
        for (name, [lo, hi]) in ranges {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::Config(format!("{name} [{lo}, {hi}] is empty or not finite")));
            }
        }
        let [blo, bhi] = self.beta_range;
        if blo < 0.0 || blo >= bhi || bhi > 0.5 {
            return Err(Error::Config(format!("beta_range ({blo}, {bhi}] must lie in (0, 0.5]")));
        }
        if self.gamma_range[0] <= 0.0 {
            return Err(Error::Config("gamma_range must be positive".into()));
        }
        if self.noise_sigma_range[0] < 0.0 || self.blur_sigma_range[0] < 0.0 {
            return Err(Error::Config("sigma ranges must be non-negative".into()));
        }
        if self.scale_range[0] <= 0.0 {
            return Err(Error::Config("scale_range must be positive".into()));
        }
        if self.bezier_lut_size < 2 {
            return Err(Error::Config("bezier_lut_size must be at least 2".into()));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!("flip_prob {} outside [0, 1]", self.flip_prob)));
        }
        Ok(())
    }

    /// Enabled style branches, in rotation order.
    pub fn modes(&self) -> Vec<StyleMode> {
        [
            (self.enable_ba, StyleMode::BA),
            (self.enable_sl, StyleMode::SL),
            (self.enable_fr, StyleMode::FR),
        ]
        .into_iter()
        .filter_map(|(on, m)| on.then_some(m))
        .collect()
    }

    /// Draws `beta` from `(lo, hi]`.
    pub fn sample_beta<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let [lo, hi] = self.beta_range;
        hi - rng.random::<f64>() * (hi - lo)
    }
}

pub(crate) fn uniform<R: Rng + ?Sized>(rng: &mut R, [lo, hi]: [f64; 2]) -> f64 {
    lo + rng.random::<f64>() * (hi - lo)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StyleMode {
    BA,
    SL,
    FR,
}

impl StyleMode {
    pub fn as_str(self) -> &'static str {
        match self {
            StyleMode::BA => "BA",
            StyleMode::SL => "SL",
            StyleMode::FR => "FR",
        }
    }
}

impl std::str::FromStr for StyleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "BA" => Ok(StyleMode::BA),
            "SL" => Ok(StyleMode::SL),
            "FR" => Ok(StyleMode::FR),
            _ => Err(Error::InvalidArgument(format!("unknown style mode {s:?}"))),
        }
    }
}

/// Intensity pipeline: blur, then noise, then gamma.
pub fn bigaug<R: Rng + ?Sized>(sample: &Sample, cfg: &AugConfig, rng: &mut R) -> Result<Sample> {
    let blur = uniform(rng, cfg.blur_sigma_range);
    let noise = uniform(rng, cfg.noise_sigma_range);
    let gamma = uniform(rng, cfg.gamma_range);
    let img = gaussian_blur(&sample.image, blur)?;
    let img = add_gaussian_noise(&img, noise, rng)?;
    let img = gamma_correct(&img, gamma)?;
    Ok(Sample { image: img, ..sample.clone() })
}

pub fn shape_location<R: Rng + ?Sized>(sample: &Sample, cfg: &AugConfig, rng: &mut R) -> Result<Sample> {
    let p1 = (rng.random::<f64>(), rng.random::<f64>());
    let p2 = (rng.random::<f64>(), rng.random::<f64>());
    let invert = rng.random::<f64>() < 0.5;
    let img = bezier_transform(&sample.image, p1, p2, invert, cfg.bezier_lut_size)?;
    Ok(Sample { image: img, ..sample.clone() })
}

/// Builds the style-augmented counterpart of a batch. `rngs` holds one
/// stream per sample. In FR mode sample `n` (1-indexed) takes the low
/// frequencies of sample `N + 1 - n`; each pair shares one `beta`, drawn
/// from the stream of its lower index.
pub fn make_style_batch<R: Rng>(batch: &[Sample], mode: StyleMode, cfg: &AugConfig, rngs: &mut [R]) -> Result<Vec<Sample>> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if rngs.len() != batch.len() {
        return Err(Error::InvalidArgument(format!(
            "{} random streams for {} samples",
            rngs.len(),
            batch.len()
        )));
    }
    match mode {
        StyleMode::BA => batch.iter().zip(rngs).map(|(s, r)| bigaug(s, cfg, r)).collect(),
        StyleMode::SL => batch.iter().zip(rngs).map(|(s, r)| shape_location(s, cfg, r)).collect(),
        StyleMode::FR => {
            let n = batch.len();
            if batch.iter().any(|s| !s.image.same_dims(&batch[0].image)) {
                return Err(Error::shape("make_style_batch", "FR needs equal image dims"));
            }
            let mut lead_beta = vec![0.0; n];
            for i in 0..n.div_ceil(2) {
                lead_beta[i] = cfg.sample_beta(&mut rngs[i]);
            }
            let betas: Vec<f64> = (0..n).map(|i| lead_beta[i.min(n - 1 - i)]).collect();
            batch
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let partner = &batch[n - 1 - i];
                    let image = low_freq_swap_cropped(&s.image, &partner.image, betas[i])?;
                    Ok(Sample { image, ..s.clone() })
                })
                .collect()
        }
    }
}
