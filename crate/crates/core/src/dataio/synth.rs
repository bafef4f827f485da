//! Synthetic multi-domain fundus-like benchmark.
//!
//! Every sample is an optic disc with a nested cup, a few vessels and a
//! smooth background. Geometry streams depend only on (seed, split, index),
//! so all domains share the same structures; each domain then applies its
//! own appearance (colour cast, gamma, blur, noise, texture, illumination).

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Mask, Sample};
use crate::rng::{hash_str, purpose, stream, StreamRng};
use crate::styleaug::{gamma_correct, gaussian_blur, gaussian_noise_field};

/// Shape distribution shared by all domains. Lengths are fractions of
/// `min(H, W)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometrySpec {
    pub disc_radius: [f64; 2],
    /// Ratio of the two disc semi-axes.
    pub eccentricity: [f64; 2],
    /// Cup semi-axes relative to the disc's.
    pub cup_ratio: [f64; 2],
    pub position_jitter: f64,
    pub vessels: [usize; 2],
}

impl Default for GeometrySpec {
    fn default() -> Self {
        Self {
            disc_radius: [0.14, 0.22],
            eccentricity: [0.8, 1.2],
            cup_ratio: [0.35, 0.65],
            position_jitter: 0.12,
            vessels: [4, 7],
        }
    }
}

/// Appearance of one domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub name: String,
    pub gamma: f64,
    pub color_cast: [f64; 3],
    pub noise_sigma: f64,
    pub blur_sigma: f64,
    /// Cycles per pixel of the background texture.
    pub texture_frequency: f64,
    #[serde(default)]
    pub texture_amplitude: f64,
    /// Amplitude of the random linear illumination gradient.
    #[serde(default)]
    pub illumination_jitter: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkSpec {
    pub height: usize,
    pub width: usize,
    pub train_count: usize,
    pub test_count: usize,
    pub geometry: GeometrySpec,
    pub domains: Vec<DomainSpec>,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        let d = |name: &str, gamma, color_cast, noise_sigma, blur_sigma, texture_frequency, texture_amplitude, illumination_jitter| DomainSpec {
            name: name.into(),
            gamma,
            color_cast,
            noise_sigma,
            blur_sigma,
            texture_frequency,
            texture_amplitude,
            illumination_jitter,
        };
        Self {
            height: 64,
            width: 64,
            train_count: 60,
            test_count: 20,
            geometry: GeometrySpec::default(),
            domains: vec![
                d("A", 1.0, [1.0, 1.0, 1.0], 0.02, 0.0, 0.05, 0.03, 0.1),
                d("B", 0.5, [1.3, 0.8, 0.9], 0.04, 0.8, 0.12, 0.06, 0.2),
                d("C", 2.2, [0.7, 1.1, 1.4], 0.08, 0.0, 0.2, 0.08, 0.15),
                d("D", 1.4, [1.5, 1.4, 0.6], 0.03, 1.2, 0.08, 0.1, 0.3),
            ],
        }
    }
}

fn check_range(name: &str, [lo, hi]: [f64; 2], min: f64, max: f64) -> Result<()> {
    if !(lo.is_finite() && hi.is_finite() && min <= lo && lo <= hi && hi <= max) {
        return Err(Error::Config(format!("{name} [{lo}, {hi}] must lie within [{min}, {max}]")));
    }
    Ok(())
}

impl BenchmarkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 {
            return Err(Error::Config(format!("image size {}x{} too small", self.height, self.width)));
        }
        let g = &self.geometry;
        check_range("disc_radius", g.disc_radius, 0.01, 0.3)?;
        check_range("eccentricity", g.eccentricity, 0.5, 2.0)?;
        check_range("cup_ratio", g.cup_ratio, 0.05, 0.95)?;
        if !(0.0..=0.2).contains(&g.position_jitter) {
            return Err(Error::Config(format!("position_jitter {} outside [0, 0.2]", g.position_jitter)));
        }
        if g.vessels[0] > g.vessels[1] {
            return Err(Error::Config("vessels range is empty".into()));
        }
        if self.domains.is_empty() {
            return Err(Error::Config("no domains in benchmark spec".into()));
        }
        let mut names: Vec<&str> = self.domains.iter().map(|d| d.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("duplicate domain names".into()));
        }
        for d in &self.domains {
            d.validate()?;
        }
        Ok(())
    }

    pub fn domain(&self, name: &str) -> Option<&DomainSpec> {
        self.domains.iter().find(|d| d.name == name)
    }
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("domain {:?}: {what}", self.name)));
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name.starts_with('.') {
            return bad("name must be a plain directory name");
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return bad("gamma must be positive");
        }
        if self.color_cast.iter().any(|c| !(*c >= 0.0 && c.is_finite())) {
            return bad("color_cast must be non-negative");
        }
        let nonneg = [
            self.noise_sigma,
            self.blur_sigma,
            self.texture_frequency,
            self.texture_amplitude,
            self.illumination_jitter,
        ];
        if nonneg.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return bad("noise, blur, texture and illumination knobs must be non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn prefix(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Test => 1,
        }
    }
}

fn uniform(rng: &mut StreamRng, [lo, hi]: [f64; 2]) -> f64 {
    lo + rng.random::<f64>() * (hi - lo)
}

/// Structure of one sample, independent of any domain.
struct Geometry {
    disc: Ellipse,
    cup: Ellipse,
    /// Vessel centre lines as point lists, with widths.
    vessels: Vec<(Vec<(f64, f64)>, f64)>,
}

#[derive(Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    angle: f64,
}

impl Ellipse {
    /// Normalized radius: `<= 1` inside.
    fn rho(&self, x: f64, y: f64) -> f64 {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        ((u / self.rx).powi(2) + (v / self.ry).powi(2)).sqrt()
    }
}

fn sample_geometry(spec: &BenchmarkSpec, rng: &mut StreamRng) -> Geometry {
    let g = &spec.geometry;
    let (h, w) = (spec.height as f64, spec.width as f64);
    let size = h.min(w);
    let r = uniform(rng, g.disc_radius) * size;
    let ecc = uniform(rng, g.eccentricity);
    let (rx, ry) = (r * ecc.sqrt(), r / ecc.sqrt());
    let angle = rng.random::<f64>() * PI;
    let jitter = |rng: &mut StreamRng| (rng.random::<f64>() * 2.0 - 1.0) * g.position_jitter * size;
    let cx = (w - 1.0) / 2.0 + jitter(rng);
    let cy = (h - 1.0) / 2.0 + jitter(rng);
    let disc = Ellipse { cx, cy, rx, ry, angle };

    let ratio = uniform(rng, g.cup_ratio);
    // offset in disc-normalized units, small enough to keep the cup inside
    let max_off = 0.5 * (1.0 - ratio);
    let (off_r, off_a) = (rng.random::<f64>() * max_off, rng.random::<f64>() * 2.0 * PI);
    let (ou, ov) = (off_r * off_a.cos() * rx, off_r * off_a.sin() * ry);
    let (s, c) = angle.sin_cos();
    let cup = Ellipse {
        cx: cx + c * ou - s * ov,
        cy: cy + s * ou + c * ov,
        rx: rx * ratio,
        ry: ry * ratio,
        angle,
    };

    let n_vessels = rng.random_range(g.vessels[0]..=g.vessels[1]);
    let vessels = (0..n_vessels)
        .map(|_| {
            let theta0 = rng.random::<f64>() * 2.0 * PI;
            let bend = (rng.random::<f64>() - 0.5) * 1.2;
            let wiggle = rng.random::<f64>() * 0.3;
            let phase = rng.random::<f64>() * 2.0 * PI;
            let width = 0.6 + rng.random::<f64>() * 0.8;
            let reach = size;
            let start = 0.3 * r;
            let pts = (0..)
                .map(|k| start + 0.5 * k as f64)
                .take_while(|&t| t < reach)
                .map(|t| {
                    let th = theta0 + bend * t / size + wiggle * (6.0 * t / size + phase).sin();
                    (cx + t * th.cos(), cy + t * th.sin())
                })
                .collect();
            (pts, width)
        })
        .collect();
    Geometry { disc, cup, vessels }
}

fn smooth_inside(rho: f64, radius_px: f64) -> f64 {
    // logistic edge about one pixel wide
    crate::graph::sigmoid((1.0 - rho) * radius_px / 0.7)
}

/// Domain-free rendering: planar RGB in `[0, 1]` plus the two masks.
fn render(spec: &BenchmarkSpec, geo: &Geometry) -> (Vec<[f64; 3]>, Mask, Mask) {
    let (h, w) = (spec.height, spec.width);
    let mut darkness = vec![0.0f64; h * w];
    for (pts, width) in &geo.vessels {
        let reach = (3.0 * width).ceil() as isize;
        for &(px, py) in pts {
            let (ix, iy) = (px.round() as isize, py.round() as isize);
            for y in (iy - reach).max(0)..=(iy + reach).min(h as isize - 1) {
                for x in (ix - reach).max(0)..=(ix + reach).min(w as isize - 1) {
                    let d2 = (x as f64 - px).powi(2) + (y as f64 - py).powi(2);
                    let v = (-d2 / (2.0 * width * width)).exp();
                    let slot = &mut darkness[y as usize * w + x as usize];
                    *slot = slot.max(v);
                }
            }
        }
    }
    let bg = [0.62, 0.3, 0.14];
    let disc_col = [0.9, 0.68, 0.42];
    let cup_col = [0.98, 0.9, 0.72];
    let vessel_col = [0.42, 0.12, 0.06];
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let size = h.min(w) as f64;
    let mut rgb = vec![[0.0; 3]; h * w];
    let mut od = vec![0u8; h * w];
    let mut oc = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let (fx, fy) = (x as f64, y as f64);
            let rd = geo.disc.rho(fx, fy);
            let rc = geo.cup.rho(fx, fy);
            od[i] = (rd <= 1.0) as u8;
            oc[i] = (rc <= 1.0 && rd <= 1.0) as u8;
            let sd = smooth_inside(rd, geo.disc.rx.min(geo.disc.ry));
            let sc = smooth_inside(rc, geo.cup.rx.min(geo.cup.ry));
            let vignette = 1.0 - 0.35 * (((fx - cx).powi(2) + (fy - cy).powi(2)).sqrt() / size).powi(2);
            for c in 0..3 {
                let mut v = bg[c] * vignette;
                v = v * (1.0 - sd) + disc_col[c] * sd;
                v = v * (1.0 - sc) + cup_col[c] * sc;
                // vessels fade over the disc and more so over the cup
                let dark = darkness[i] * (1.0 - 0.4 * sd) * (1.0 - 0.6 * sc);
                rgb[i][c] = v * (1.0 - dark) + vessel_col[c] * dark;
            }
        }
    }
    (
        rgb,
        Mask::new(h, w, od).expect("binary"),
        Mask::new(h, w, oc).expect("binary"),
    )
}

fn stylize(spec: &BenchmarkSpec, domain: &DomainSpec, rgb: &[[f64; 3]], rng: &mut StreamRng) -> Result<Image> {
    let (h, w) = (spec.height, spec.width);
    let n = h * w;
    let tex_angle = rng.random::<f64>() * PI;
    let tex_phase = rng.random::<f64>() * 2.0 * PI;
    let (ts, tc) = tex_angle.sin_cos();
    let illum_angle = rng.random::<f64>() * 2.0 * PI;
    let illum_amp = domain.illumination_jitter * rng.random::<f64>();
    let (is, ic) = illum_angle.sin_cos();
    let size = h.min(w) as f64;
    let mut data = vec![0.0; 3 * n];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let (fx, fy) = (x as f64, y as f64);
            let tex = domain.texture_amplitude
                * (2.0 * PI * domain.texture_frequency * (tc * fx + ts * fy) + tex_phase).sin();
            let illum = illum_amp * ((ic * (fx - w as f64 / 2.0) + is * (fy - h as f64 / 2.0)) / size);
            for c in 0..3 {
                let v = rgb[i][c] * domain.color_cast[c] * (1.0 + illum) + tex;
                data[c * n + i] = v.clamp(0.0, 1.0);
            }
        }
    }
    let img = Image::new(3, h, w, data)?;
    let img = gaussian_blur(&img, domain.blur_sigma)?;
    let img = gamma_correct(&img, domain.gamma)?;
    let noise = gaussian_noise_field(3 * n, domain.noise_sigma, rng)?;
    Ok(img.map_indexed(|i, v| (v + noise[i]).clamp(0.0, 1.0)))
}

fn sample_id(split: Split, index: usize) -> String {
    format!("{}_{index:04}", split.prefix())
}

/// Renders `n` samples of one domain and split.
pub fn synth_domain(spec: &BenchmarkSpec, domain: &DomainSpec, split: Split, n: usize, seed: u64) -> Result<Vec<Sample>> {
    spec.validate()?;
    domain.validate()?;
    if n == 0 {
        return Err(Error::InvalidArgument("sample count must be at least 1".into()));
    }
    (0..n)
        .map(|i| {
            let mut geo_rng = stream(seed, &[purpose::GEOMETRY, split.tag(), i as u64]);
            let geo = sample_geometry(spec, &mut geo_rng);
            let (rgb, mask_od, mask_oc) = render(spec, &geo);
            let mut app_rng = stream(seed, &[purpose::APPEARANCE, hash_str(&domain.name), split.tag(), i as u64]);
            let image = stylize(spec, domain, &rgb, &mut app_rng)?;
            Ok(Sample {
                image,
                mask_od,
                mask_oc,
                domain: domain.name.clone(),
                id: sample_id(split, i),
            })
        })
        .collect()
}

/// Every domain's train and test splits.
pub fn synth_benchmark(spec: &BenchmarkSpec, seed: u64) -> Result<Vec<Sample>> {
    spec.validate()?;
    let mut out = Vec::new();
    for d in &spec.domains {
        if spec.train_count > 0 {
            out.extend(synth_domain(spec, d, Split::Train, spec.train_count, seed)?);
        }
        if spec.test_count > 0 {
            out.extend(synth_domain(spec, d, Split::Test, spec.test_count, seed)?);
        }
    }
    Ok(out)
}
