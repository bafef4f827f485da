//! Low-frequency amplitude replacement between two images.

use crate::error::{Error, Result};
use crate::fft::{fft2, ifft2, signed_frequency, ComplexPlane};
use crate::image::Image;

/// Side of the centered low-frequency square, `round(beta * min(H, W))`.
pub fn swap_side(beta: f64, height: usize, width: usize) -> usize {
    (beta * height.min(width) as f64).round() as usize
}

/// Whether DFT bin `(u, v)` lies in the centered square of side `side`
/// (after a zero-frequency shift). The square is kept symmetric about zero
/// frequency, `|k| < side / 2` on both axes, so the edited spectrum stays
/// Hermitian and its inverse is real.
pub fn in_swap_region(u: usize, v: usize, height: usize, width: usize, side: usize) -> bool {
    let ku = signed_frequency(u, height).unsigned_abs();
    let kv = signed_frequency(v, width).unsigned_abs();
    2 * ku < side && 2 * kv < side
}

fn check_pair(a: &Image, b: &Image, beta: f64) -> Result<()> {
    if !a.same_dims(b) {
        return Err(Error::shape(
            "low_freq_swap",
            format!(
                "{}x{}x{} vs {}x{}x{}",
                a.channels(),
                a.height(),
                a.width(),
                b.channels(),
                b.height(),
                b.width()
            ),
        ));
    }
    if !(beta > 0.0 && beta <= 0.5) {
        return Err(Error::InvalidArgument(format!("beta must be in (0, 0.5], got {beta}")));
    }
    Ok(())
}

/// Per-channel amplitude swap without the final clamp. `a` keeps its phase
/// everywhere and its amplitude outside the swap square.
pub fn low_freq_swap_unclamped(a: &Image, b: &Image, beta: f64) -> Result<Image> {
    check_pair(a, b, beta)?;
    let (h, w) = (a.height(), a.width());
    let side = swap_side(beta, h, w);
    let mut out = a.clone();
    for c in 0..a.channels() {
        let spec_a = fft2(a.plane(c), h, w)?;
        let spec_b = fft2(b.plane(c), h, w)?;
        let amp_b = spec_b.amplitude();
        let mut mixed: ComplexPlane = spec_a.clone();
        for u in 0..h {
            for v in 0..w {
                if in_swap_region(u, v, h, w, side) {
                    let i = u * w + v;
                    let phase = spec_a.im[i].atan2(spec_a.re[i]);
                    mixed.re[i] = amp_b[i] * phase.cos();
                    mixed.im[i] = amp_b[i] * phase.sin();
                }
            }
        }
        let back = ifft2(&mixed)?;
        out.plane_mut(c).copy_from_slice(&back.re);
    }
    Ok(out)
}

/// Replaces the low-frequency amplitude of `a` with that of `b`, then clamps
/// to `[0, 1]`. Height and width must be powers of two.
pub fn low_freq_swap(a: &Image, b: &Image, beta: f64) -> Result<Image> {
    let mut out = low_freq_swap_unclamped(a, b, beta)?;
    out.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(out)
}

/// Largest centered power-of-two box: `(y0, x0, side_h, side_w)`.
pub fn pow2_crop_box(height: usize, width: usize) -> (usize, usize, usize, usize) {
    let ph = 1 << (usize::BITS - 1 - height.leading_zeros());
    let pw = 1 << (usize::BITS - 1 - width.leading_zeros());
    ((height - ph) / 2, (width - pw) / 2, ph, pw)
}

pub(crate) fn crop(img: &Image, y0: usize, x0: usize, h: usize, w: usize) -> Image {
    let mut data = Vec::with_capacity(img.channels() * h * w);
    for c in 0..img.channels() {
        for y in y0..y0 + h {
            let row = &img.plane(c)[y * img.width()..(y + 1) * img.width()];
            data.extend_from_slice(&row[x0..x0 + w]);
        }
    }
    Image::new(img.channels(), h, w, data).expect("crop inside image")
}

pub(crate) fn paste(dst: &mut Image, src: &Image, y0: usize, x0: usize) {
    let width = dst.width();
    for c in 0..src.channels() {
        let s = src.plane(c);
        let d = dst.plane_mut(c);
        for y in 0..src.height() {
            d[(y0 + y) * width + x0..(y0 + y) * width + x0 + src.width()]
                .copy_from_slice(&s[y * src.width()..(y + 1) * src.width()]);
        }
    }
}

/// [`low_freq_swap`] for arbitrary sizes: the swap runs on the largest
/// centered power-of-two box and pixels outside it are left as they are.
pub fn low_freq_swap_cropped(a: &Image, b: &Image, beta: f64) -> Result<Image> {
    check_pair(a, b, beta)?;
    let (h, w) = (a.height(), a.width());
    if h.is_power_of_two() && w.is_power_of_two() {
        return low_freq_swap(a, b, beta);
    }
    let (y0, x0, ch, cw) = pow2_crop_box(h, w);
    let swapped = low_freq_swap(&crop(a, y0, x0, ch, cw), &crop(b, y0, x0, ch, cw), beta)?;
    let mut out = a.clone();
    paste(&mut out, &swapped, y0, x0);
    Ok(out)
}
