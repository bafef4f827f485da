//! Intensity-only style transforms: gamma, noise, blur, Bezier curves.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::image::Image;

/// `v -> v^gamma` on every pixel of every channel.
pub fn gamma_correct(img: &Image, gamma: f64) -> Result<Image> {
    if !gamma.is_finite() || gamma <= 0.0 {
        return Err(Error::InvalidArgument(format!("gamma must be positive, got {gamma}")));
    }
    img.ensure_unit_range("gamma_correct input")?;
    Ok(img.map(|v| v.powf(gamma)))
}

/// `n` i.i.d. draws from `Normal(0, sigma^2)`.
pub fn gaussian_noise_field<R: Rng + ?Sized>(n: usize, sigma: f64, rng: &mut R) -> Result<Vec<f64>> {
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(Error::InvalidArgument(format!("noise sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(vec![0.0; n]);
    }
    let normal = Normal::new(0.0, sigma).expect("validated sigma");
    Ok((0..n).map(|_| normal.sample(rng)).collect())
}

/// Adds per-pixel Gaussian noise and clamps back to `[0, 1]`.
pub fn add_gaussian_noise<R: Rng + ?Sized>(img: &Image, sigma: f64, rng: &mut R) -> Result<Image> {
    let noise = gaussian_noise_field(img.data().len(), sigma, rng)?;
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let mut out = img.clone();
    out.data_mut()
        .iter_mut()
        .zip(noise)
        .for_each(|(v, n)| *v = (*v + n).clamp(0.0, 1.0));
    Ok(out)
}

/// Maps an arbitrary integer index onto `[0, n)` by mirroring with the edge
/// sample repeated (`d c b a | a b c d | d c b a`).
fn reflect_index(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period) as usize;
    if m < n {
        m
    } else {
        2 * n - 1 - m
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as usize;
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    k
}

/// Separable Gaussian blur, radius `ceil(3 sigma)`, reflect padding.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Result<Image> {
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(Error::InvalidArgument(format!("blur sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;
    let (h, w) = (img.height(), img.width());
    let mut out = img.clone();
    let mut tmp = vec![0.0; h * w];
    // a normalized positive kernel takes convex combinations
    let lo = img.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = img.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for c in 0..img.channels() {
        let src = img.plane(c);
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, kv)| kv * src[y * w + reflect_index(x as isize + k as isize - radius, w)])
                    .sum();
            }
        }
        let dst = out.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, kv)| kv * tmp[reflect_index(y as isize + k as isize - radius, h) * w + x])
                    .sum::<f64>()
                    .clamp(lo, hi);
            }
        }
    }
    Ok(out)
}

/// Intensity lookup table sampled from a cubic Bezier curve.
///
/// The curve runs from `(0, 0)` to `(1, 1)` through the two interior control
/// points. Inversion pairs the x samples with the y samples in reverse
/// order, which yields a curve from `(0, 1)` to `(1, 0)`. The x coordinate
/// is non-decreasing in `t` for any controls inside the unit square, so the
/// samples can be searched directly.
#[derive(Clone, Debug)]
pub struct BezierLut {
    xs: Vec<f64>,
    ys: Vec<f64>,
}

fn cubic(p0: f64, p1: f64, p2: f64, p3: f64, t: f64) -> f64 {
    let s = 1.0 - t;
    s * s * s * p0 + 3.0 * s * s * t * p1 + 3.0 * s * t * t * p2 + t * t * t * p3
}

impl BezierLut {
    pub fn new(p1: (f64, f64), p2: (f64, f64), invert: bool, samples: usize) -> Result<Self> {
        let inside = |p: (f64, f64)| (0.0..=1.0).contains(&p.0) && (0.0..=1.0).contains(&p.1);
        if !inside(p1) || !inside(p2) {
            return Err(Error::InvalidArgument(format!(
                "Bezier controls {p1:?}, {p2:?} outside the unit square"
            )));
        }
        if samples < 2 {
            return Err(Error::InvalidArgument("Bezier lookup needs at least 2 samples".into()));
        }
        let ts = (0..samples).map(|j| j as f64 / (samples - 1) as f64);
        let xs: Vec<f64> = ts.clone().map(|t| cubic(0.0, p1.0, p2.0, 1.0, t)).collect();
        let mut ys: Vec<f64> = ts.map(|t| cubic(0.0, p1.1, p2.1, 1.0, t)).collect();
        if invert {
            ys.reverse();
        }
        Ok(Self { xs, ys })
    }

    /// Piecewise-linear interpolation on the sampled x coordinate; ties
    /// resolve to the first sample.
    pub fn apply(&self, v: f64) -> f64 {
        let j = self.xs.partition_point(|&x| x < v);
        if j == 0 {
            return self.ys[0];
        }
        if j == self.xs.len() {
            return *self.ys.last().expect("non-empty");
        }
        let (x0, x1) = (self.xs[j - 1], self.xs[j]);
        if x1 <= x0 {
            return self.ys[j - 1];
        }
        let f = (v - x0) / (x1 - x0);
        if f >= 1.0 {
            return self.ys[j];
        }
        self.ys[j - 1] + f * (self.ys[j] - self.ys[j - 1])
    }
}

pub fn bezier_transform(img: &Image, p1: (f64, f64), p2: (f64, f64), invert: bool, lut_size: usize) -> Result<Image> {
    img.ensure_unit_range("bezier_transform input")?;
    let lut = BezierLut::new(p1, p2, invert, lut_size)?;
    Ok(img.map(|v| lut.apply(v).clamp(0.0, 1.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_image(c: usize, h: usize, w: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(c, h, w, (0..c * h * w).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn gamma_cases() {
        let img = Image::new(1, 1, 4, vec![0.0, 0.5, 1.0, 0.3]).unwrap();
        assert_eq!(gamma_correct(&img, 1.0).unwrap(), img);
        let g2 = gamma_correct(&img, 2.0).unwrap();
        assert_eq!(g2.data()[1], 0.25);
        for gamma in [0.3, 1.7, 4.0] {
            let out = gamma_correct(&img, gamma).unwrap();
            assert_eq!(out.data()[0], 0.0);
            assert_eq!(out.data()[2], 1.0);
        }
        assert!(gamma_correct(&img, 0.0).is_err());
        assert!(gamma_correct(&Image::filled(1, 1, 1, 1.5), 2.0).is_err());
    }

    #[test]
    fn noise_cases() {
        let img = random_image(3, 8, 8, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(add_gaussian_noise(&img, 0.0, &mut rng).unwrap(), img);
        let a = add_gaussian_noise(&img, 0.1, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = add_gaussian_noise(&img, 0.1, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(add_gaussian_noise(&img, -0.1, &mut rng).is_err());
    }

    #[test]
    fn noise_mean_is_small() {
        let field = gaussian_noise_field(64 * 64, 0.05, &mut ChaCha8Rng::seed_from_u64(2024)).unwrap();
        let mean = field.iter().sum::<f64>() / field.len() as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
    }

    /// Brute-force 2-D convolution with the outer-product kernel.
    fn blur_2d_oracle(img: &Image, sigma: f64) -> Image {
        let k = gaussian_kernel(sigma);
        let r = (k.len() / 2) as isize;
        let (h, w) = (img.height(), img.width());
        let mut out = img.clone();
        for c in 0..img.channels() {
            for y in 0..h {
                for x in 0..w {
                    let mut s = 0.0;
                    for (i, ki) in k.iter().enumerate() {
                        for (j, kj) in k.iter().enumerate() {
                            let yy = reflect_index(y as isize + i as isize - r, h);
                            let xx = reflect_index(x as isize + j as isize - r, w);
                            s += ki * kj * img.get(c, yy, xx);
                        }
                    }
                    out.plane_mut(c)[y * w + x] = s;
                }
            }
        }
        out
    }

    #[test]
    fn blur_cases() {
        let img = random_image(1, 16, 16, 3);
        assert_eq!(gaussian_blur(&img, 0.0).unwrap(), img);
        let flat = Image::filled(3, 8, 8, 0.42);
        let blurred = gaussian_blur(&flat, 1.3).unwrap();
        assert!(blurred.data().iter().all(|v| (v - 0.42).abs() < 1e-12));
        assert!(gaussian_blur(&img, -1.0).is_err());
    }

    #[test]
    fn blur_preserves_mean_and_matches_oracle() {
        let img = random_image(1, 16, 16, 4);
        for sigma in [0.7, 1.5, 6.0] {
            let fast = gaussian_blur(&img, sigma).unwrap();
            let slow = blur_2d_oracle(&img, sigma);
            let diff = fast
                .data()
                .iter()
                .zip(slow.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(diff < 1e-12);
            let m0 = img.data().iter().sum::<f64>() / 256.0;
            let m1 = slow.data().iter().sum::<f64>() / 256.0;
            assert!((m0 - m1).abs() < 1e-9, "sigma {sigma}: {m0} vs {m1}");
        }
    }

    #[test]
    fn bezier_linear_controls() {
        let img = random_image(3, 8, 8, 5);
        let p1 = (1.0 / 3.0, 1.0 / 3.0);
        let p2 = (2.0 / 3.0, 2.0 / 3.0);
        let id = bezier_transform(&img, p1, p2, false, 1000).unwrap();
        let inv = bezier_transform(&img, p1, p2, true, 1000).unwrap();
        for ((v, a), b) in img.data().iter().zip(id.data()).zip(inv.data()) {
            assert!((v - a).abs() < 1e-6);
            assert!((1.0 - v - b).abs() < 1e-6);
        }
    }

    #[test]
    fn bezier_endpoints_fixed() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..200 {
            let p1 = (rng.random::<f64>(), rng.random::<f64>());
            let p2 = (rng.random::<f64>(), rng.random::<f64>());
            let lut = BezierLut::new(p1, p2, false, 1000).unwrap();
            assert_eq!(lut.apply(0.0), 0.0);
            assert_eq!(lut.apply(1.0), 1.0);
            let inv = BezierLut::new(p1, p2, true, 1000).unwrap();
            assert_eq!(inv.apply(0.0), 1.0);
            assert_eq!(inv.apply(1.0), 0.0);
        }
    }

    #[test]
    fn bezier_rejects_outside_controls() {
        let img = Image::filled(1, 1, 1, 0.5);
        assert!(bezier_transform(&img, (1.2, 0.0), (0.5, 0.5), false, 1000).is_err());
    }
}
