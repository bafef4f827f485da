//! Label-preserving geometric augmentation: flip, rotation, isotropic scale.

use rand::Rng;

use crate::image::{Image, Mask, Sample};

use super::{uniform, AugConfig};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpatialParams {
    pub flip: bool,
    pub angle_deg: f64,
    pub scale: f64,
}

impl SpatialParams {
    pub const IDENTITY: SpatialParams = SpatialParams {
        flip: false,
        angle_deg: 0.0,
        scale: 1.0,
    };

    pub fn sample<R: Rng + ?Sized>(cfg: &AugConfig, rng: &mut R) -> Self {
        let flip = rng.random::<f64>() < cfg.flip_prob;
        let angle_deg = uniform(rng, cfg.rotation_range_deg);
        let scale = uniform(rng, cfg.scale_range);
        Self { flip, angle_deg, scale }
    }
}

/// Maps output pixel `(x, y)` back to its source location.
fn source_coords(p: &SpatialParams, x: usize, y: usize, h: usize, w: usize) -> (f64, f64) {
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let xo = if p.flip { (w - 1 - x) as f64 } else { x as f64 };
    let (dx, dy) = (xo - cx, y as f64 - cy);
    let (sin, cos) = (-p.angle_deg.to_radians()).sin_cos();
    let rx = (cos * dx - sin * dy) / p.scale;
    let ry = (sin * dx + cos * dy) / p.scale;
    (cx + rx, cy + ry)
}

fn warp_image(img: &Image, p: &SpatialParams) -> Image {
    let (h, w) = (img.height(), img.width());
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = source_coords(p, x, y, h, w);
            // clamp-to-edge bilinear sampling
            let sx = sx.clamp(0.0, (w - 1) as f64);
            let sy = sy.clamp(0.0, (h - 1) as f64);
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
            for c in 0..img.channels() {
                let v = img.get(c, y0, x0) * (1.0 - fx) * (1.0 - fy)
                    + img.get(c, y0, x1) * fx * (1.0 - fy)
                    + img.get(c, y1, x0) * (1.0 - fx) * fy
                    + img.get(c, y1, x1) * fx * fy;
                out.plane_mut(c)[y * w + x] = v;
            }
        }
    }
    out
}

fn warp_mask(mask: &Mask, p: &SpatialParams) -> Mask {
    let (h, w) = (mask.height(), mask.width());
    let data = (0..h * w)
        .map(|i| {
            let (sx, sy) = source_coords(p, i % w, i / w, h, w);
            let (xr, yr) = (sx.round(), sy.round());
            if xr < 0.0 || yr < 0.0 || xr > (w - 1) as f64 || yr > (h - 1) as f64 {
                0
            } else {
                mask.get(yr as usize, xr as usize)
            }
        })
        .collect();
    Mask::new(h, w, data).expect("nearest sampling keeps masks binary")
}

/// Applies the same geometric transform to the image (bilinear) and both
/// masks (nearest neighbour).
pub fn apply_spatial(sample: &Sample, p: &SpatialParams) -> Sample {
    Sample {
        image: warp_image(&sample.image, p),
        mask_od: warp_mask(&sample.mask_od, p),
        mask_oc: warp_mask(&sample.mask_oc, p),
        ..sample.clone()
    }
}

pub fn spatial_augment<R: Rng + ?Sized>(sample: &Sample, cfg: &AugConfig, rng: &mut R) -> Sample {
    apply_spatial(sample, &SpatialParams::sample(cfg, rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample(seed: u64) -> Sample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (16, 16);
        let image = Image::new(3, h, w, (0..3 * h * w).map(|_| rng.random::<f64>()).collect()).unwrap();
        let od: Vec<u8> = (0..h * w).map(|i| ((i / w) as i32 - 8).pow(2) + ((i % w) as i32 - 7).pow(2) < 30).map(u8::from).collect();
        let oc: Vec<u8> = (0..h * w).map(|i| ((i / w) as i32 - 8).pow(2) + ((i % w) as i32 - 7).pow(2) < 8).map(u8::from).collect();
        Sample {
            image,
            mask_od: Mask::new(h, w, od).unwrap(),
            mask_oc: Mask::new(h, w, oc).unwrap(),
            domain: "A".into(),
            id: "s".into(),
        }
    }

    #[test]
    fn identity_params_leave_sample_unchanged() {
        let s = sample(1);
        assert_eq!(apply_spatial(&s, &SpatialParams::IDENTITY), s);
    }

    #[test]
    fn double_flip_is_identity() {
        let s = sample(2);
        let flip = SpatialParams { flip: true, ..SpatialParams::IDENTITY };
        let once = apply_spatial(&s, &flip);
        assert_ne!(once, s);
        assert_eq!(apply_spatial(&once, &flip), s);
    }

    #[test]
    fn rotated_masks_stay_binary() {
        let s = sample(3);
        let cfg = AugConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let out = spatial_augment(&s, &cfg, &mut rng);
            assert!(out.mask_od.data().iter().all(|&v| v <= 1));
            assert!(out.mask_oc.data().iter().all(|&v| v <= 1));
            assert!(out.mask_od.count() > 0);
        }
    }
}
