//! Radix-2 Cooley-Tukey FFT on real 2-D planes.

use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Complex `H x W` spectrum (or signal) in split real/imaginary storage.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexPlane {
    pub height: usize,
    pub width: usize,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl ComplexPlane {
    pub fn from_real(height: usize, width: usize, data: &[f64]) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape("complex plane", format!("{height}x{width} with {} values", data.len())));
        }
        Ok(Self {
            height,
            width,
            re: data.to_vec(),
            im: vec![0.0; data.len()],
        })
    }

    pub fn amplitude(&self) -> Vec<f64> {
        self.re.iter().zip(&self.im).map(|(r, i)| r.hypot(*i)).collect()
    }

    pub fn phase(&self) -> Vec<f64> {
        self.re.iter().zip(&self.im).map(|(r, i)| i.atan2(*r)).collect()
    }

    /// Rebuilds a plane from polar components.
    pub fn from_polar(height: usize, width: usize, amplitude: &[f64], phase: &[f64]) -> Self {
        let (re, im) = amplitude
            .iter()
            .zip(phase)
            .map(|(a, p)| (a * p.cos(), a * p.sin()))
            .unzip();
        Self { height, width, re, im }
    }
}

/// In-place iterative radix-2 transform of one complex sequence.
/// `inverse` flips the twiddle sign; no scaling is applied here.
fn fft_in_place(re: &mut [f64], im: &mut [f64], inverse: bool) {
    let n = re.len();
    debug_assert!(n.is_power_of_two());
    // bit-reversal permutation
    let mut j = 0;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        for k in 0..half {
            let angle = sign * 2.0 * PI * k as f64 / len as f64;
            let (wi, wr) = angle.sin_cos();
            for start in (0..n).step_by(len) {
                let (a, b) = (start + k, start + k + half);
                let tr = re[b] * wr - im[b] * wi;
                let ti = re[b] * wi + im[b] * wr;
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
            }
        }
        len <<= 1;
    }
}

fn transform(plane: &mut ComplexPlane, inverse: bool) -> Result<()> {
    let (h, w) = (plane.height, plane.width);
    if !h.is_power_of_two() || !w.is_power_of_two() {
        return Err(Error::InvalidArgument(format!(
            "FFT needs power-of-two dims, got {h}x{w}"
        )));
    }
    for y in 0..h {
        fft_in_place(&mut plane.re[y * w..(y + 1) * w], &mut plane.im[y * w..(y + 1) * w], inverse);
    }
    let mut cr = vec![0.0; h];
    let mut ci = vec![0.0; h];
    for x in 0..w {
        for y in 0..h {
            cr[y] = plane.re[y * w + x];
            ci[y] = plane.im[y * w + x];
        }
        fft_in_place(&mut cr, &mut ci, inverse);
        for y in 0..h {
            plane.re[y * w + x] = cr[y];
            plane.im[y * w + x] = ci[y];
        }
    }
    if inverse {
        let scale = 1.0 / (h * w) as f64;
        plane.re.iter_mut().for_each(|v| *v *= scale);
        plane.im.iter_mut().for_each(|v| *v *= scale);
    }
    Ok(())
}

/// Forward 2-D DFT of a real `H x W` channel (unnormalized).
pub fn fft2(channel: &[f64], height: usize, width: usize) -> Result<ComplexPlane> {
    let mut plane = ComplexPlane::from_real(height, width, channel)?;
    transform(&mut plane, false)?;
    Ok(plane)
}

/// Inverse 2-D DFT, scaled by `1 / (H W)`.
pub fn ifft2(plane: &ComplexPlane) -> Result<ComplexPlane> {
    let mut out = plane.clone();
    transform(&mut out, true)?;
    Ok(out)
}

/// Signed frequency of DFT index `i` for length `n`: `[0, n/2) -> itself`,
/// `[n/2, n) -> i - n`.
pub fn signed_frequency(i: usize, n: usize) -> isize {
    if i < n / 2 {
        i as isize
    } else {
        i as isize - n as isize
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// O(N^2) DFT straight from the definition.
    fn dft_naive(x: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
        let mut re = vec![0.0; h * w];
        let mut im = vec![0.0; h * w];
        for u in 0..h {
            for v in 0..w {
                for y in 0..h {
                    for xx in 0..w {
                        let ang = -2.0 * PI * ((u * y) as f64 / h as f64 + (v * xx) as f64 / w as f64);
                        re[u * w + v] += x[y * w + xx] * ang.cos();
                        im[u * w + v] += x[y * w + xx] * ang.sin();
                    }
                }
            }
        }
        (re, im)
    }

    #[test]
    fn matches_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (h, w) = (8, 4);
        let x: Vec<f64> = (0..h * w).map(|_| rng.random::<f64>()).collect();
        let spec = fft2(&x, h, w).unwrap();
        let (re, im) = dft_naive(&x, h, w);
        for i in 0..h * w {
            assert!((spec.re[i] - re[i]).abs() < 1e-10);
            assert!((spec.im[i] - im[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn constant_image_has_single_dc_bin() {
        let c = 0.37;
        let spec = fft2(&[c; 64], 8, 8).unwrap();
        let amp = spec.amplitude();
        assert!((amp[0] - 64.0 * c).abs() < 1e-12);
        assert!(amp[1..].iter().all(|a| a.abs() < 1e-12));
    }

    #[test]
    fn round_trip_and_parseval() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Vec<f64> = (0..256).map(|_| rng.random::<f64>()).collect();
        let spec = fft2(&x, 16, 16).unwrap();
        let back = ifft2(&spec).unwrap();
        let err = back.re.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-9);
        assert!(back.im.iter().all(|v| v.abs() < 1e-9));
        let energy: f64 = x.iter().map(|v| v * v).sum();
        let spec_energy: f64 = spec.amplitude().iter().map(|a| a * a).sum::<f64>() / 256.0;
        assert!((energy - spec_energy).abs() < 1e-9);
    }

    #[test]
    fn rejects_non_power_of_two() {
        assert!(fft2(&[0.0; 12], 3, 4).is_err());
    }

    #[test]
    fn signed_frequencies() {
        let f: Vec<isize> = (0..8).map(|i| signed_frequency(i, 8)).collect();
        assert_eq!(f, vec![0, 1, 2, 3, -4, -3, -2, -1]);
    }
}
