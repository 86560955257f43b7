//! Random flip/rotation/photometric jitter and resize-then-crop.
//!
//! Geometric transforms are applied identically to image (bilinear) and
//! mask (nearest neighbour). Photometric transforms touch the image only.

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::Mask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CropMode {
    Center,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    pub horizontal_flip_prob: f64,
    /// Closed interval in degrees, within `[-180, 180]`.
    pub rotation_range_degrees: (f64, f64),
    pub brightness_scale_range: (f64, f64),
    pub contrast_scale_range: (f64, f64),
    pub output_size: usize,
    pub crop: CropMode,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            horizontal_flip_prob: 0.5,
            rotation_range_degrees: (-180.0, 180.0),
            brightness_scale_range: (0.5, 1.5),
            contrast_scale_range: (0.5, 1.5),
            output_size: 256,
            crop: CropMode::Random,
        }
    }
}

impl AugmentationConfig {
    /// A configuration that leaves `size×size` inputs untouched.
    pub fn identity(size: usize) -> Self {
        Self {
            horizontal_flip_prob: 0.0,
            rotation_range_degrees: (0.0, 0.0),
            brightness_scale_range: (1.0, 1.0),
            contrast_scale_range: (1.0, 1.0),
            output_size: size,
            crop: CropMode::Center,
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(0.0..=1.0).contains(&self.horizontal_flip_prob) {
            errs.push(format!(
                "augment.flip_prob must be in [0, 1], got {}",
                self.horizontal_flip_prob
            ));
        }
        let (lo, hi) = self.rotation_range_degrees;
        if !(-180.0 <= lo && lo <= hi && hi <= 180.0) {
            errs.push(format!("augment.rotation range [{lo}, {hi}] must lie within [-180, 180]"));
        }
        for (name, (lo, hi)) in [
            ("brightness", self.brightness_scale_range),
            ("contrast", self.contrast_scale_range),
        ] {
            if !(lo > 0.0 && lo <= hi) {
                errs.push(format!("augment.{name} range [{lo}, {hi}] needs 0 < lo <= hi"));
            }
        }
        if self.output_size == 0 {
            errs.push("augment.output_size must be positive".into());
        }
        errs
    }
}

fn draw(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    let u: f64 = rng.random();
    lo + (hi - lo) * u
}

fn flip_horizontal(sample: &Sample) -> Sample {
    let mut image = sample.image.clone();
    image.invert_axis(Axis(2));
    let mut mask = sample.mask.clone();
    mask.invert_axis(Axis(1));
    Sample {
        id: sample.id.clone(),
        image: image.as_standard_layout().into_owned(),
        mask: mask.as_standard_layout().into_owned(),
    }
}

/// Exact rotation by a multiple of 90° (counter-clockwise on screen).
fn rotate_quarter(sample: &Sample, quarters: usize) -> Sample {
    let mut image = sample.image.clone();
    let mut mask = sample.mask.clone();
    for _ in 0..quarters % 4 {
        // (y, x) <- (x, W-1-y): transpose then flip rows
        image.swap_axes(1, 2);
        image.invert_axis(Axis(1));
        mask.swap_axes(0, 1);
        mask.invert_axis(Axis(0));
    }
    Sample {
        id: sample.id.clone(),
        image: image.as_standard_layout().into_owned(),
        mask: mask.as_standard_layout().into_owned(),
    }
}

fn bilinear_zero(plane: ArrayView2<f32>, y: f64, x: f64) -> f32 {
    let (h, w) = plane.dim();
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = ((y - y0) as f32, (x - x0) as f32);
    let at = |yy: f64, xx: f64| -> f32 {
        if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
            0.0
        } else {
            plane[[yy as usize, xx as usize]]
        }
    };
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1.0) * fx;
    let bottom = at(y0 + 1.0, x0) * (1.0 - fx) + at(y0 + 1.0, x0 + 1.0) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Rotation about the image center; uncovered corners are filled with 0.
fn rotate_arbitrary(sample: &Sample, degrees: f64) -> Sample {
    let (h, w) = sample.mask.dim();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = degrees.to_radians().sin_cos();
    // inverse map: output (y, x) -> source
    let src = |y: usize, x: usize| {
        let (dy, dx) = (y as f64 - cy, x as f64 - cx);
        (cy + cos * dy + sin * dx, cx - sin * dy + cos * dx)
    };
    let mut image = Array3::<f32>::zeros((3, h, w));
    for c in 0..3 {
        let plane = sample.image.index_axis(Axis(0), c);
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = src(y, x);
                image[[c, y, x]] = bilinear_zero(plane, sy, sx);
            }
        }
    }
    let mask = Array2::from_shape_fn((h, w), |(y, x)| {
        let (sy, sx) = src(y, x);
        let (ry, rx) = (sy.round(), sx.round());
        if ry < 0.0 || rx < 0.0 || ry >= h as f64 || rx >= w as f64 {
            0
        } else {
            sample.mask[[ry as usize, rx as usize]]
        }
    });
    Sample {
        id: sample.id.clone(),
        image,
        mask,
    }
}

fn rotate(sample: &Sample, degrees: f64) -> Sample {
    let turns = degrees / 90.0;
    let square = sample.height() == sample.width();
    if turns == turns.round() && (square || turns.rem_euclid(2.0) == 0.0) {
        rotate_quarter(sample, turns.rem_euclid(4.0) as usize)
    } else {
        rotate_arbitrary(sample, degrees)
    }
}

fn photometric(image: &mut Array3<f32>, brightness: f64, contrast: f64) {
    if brightness != 1.0 {
        let b = brightness as f32;
        image.mapv_inplace(|v| (v * b).clamp(0.0, 1.0));
    }
    if contrast != 1.0 {
        let mean = image.mean().unwrap_or(0.0);
        let c = contrast as f32;
        image.mapv_inplace(|v| ((v - mean) * c + mean).clamp(0.0, 1.0));
    }
}

fn resize(sample: &Sample, out_h: usize, out_w: usize) -> Sample {
    let (h, w) = sample.mask.dim();
    let (sy, sx) = (h as f64 / out_h as f64, w as f64 / out_w as f64);
    let coord = |o: usize, scale: f64, n: usize| ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
    let mut image = Array3::<f32>::zeros((3, out_h, out_w));
    for c in 0..3 {
        let plane = sample.image.index_axis(Axis(0), c);
        for y in 0..out_h {
            let fy = coord(y, sy, h);
            let (y0, ty) = (fy.floor() as usize, (fy - fy.floor()) as f32);
            let y1 = (y0 + 1).min(h - 1);
            for x in 0..out_w {
                let fx = coord(x, sx, w);
                let (x0, tx) = (fx.floor() as usize, (fx - fx.floor()) as f32);
                let x1 = (x0 + 1).min(w - 1);
                let top = plane[[y0, x0]] * (1.0 - tx) + plane[[y0, x1]] * tx;
                let bottom = plane[[y1, x0]] * (1.0 - tx) + plane[[y1, x1]] * tx;
                image[[c, y, x]] = top * (1.0 - ty) + bottom * ty;
            }
        }
    }
    let nearest = |o: usize, scale: f64, n: usize| (((o as f64 + 0.5) * scale) as usize).min(n - 1);
    let mask: Mask = Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        sample.mask[[nearest(y, sy, h), nearest(x, sx, w)]]
    });
    Sample {
        id: sample.id.clone(),
        image,
        mask,
    }
}

fn crop_offsets(sample: &Sample, size: usize, mode: CropMode, u: (f64, f64)) -> (usize, usize) {
    let (dy, dx) = (sample.height() - size, sample.width() - size);
    match mode {
        CropMode::Center => (dy / 2, dx / 2),
        CropMode::Random => (
            ((u.0 * (dy + 1) as f64) as usize).min(dy),
            ((u.1 * (dx + 1) as f64) as usize).min(dx),
        ),
    }
}

/// Scales so the shorter side equals `size`, keeping the aspect ratio.
pub fn resize_short_side(sample: &Sample, size: usize) -> Sample {
    let (h, w) = sample.mask.dim();
    let short = h.min(w);
    if short == size {
        return sample.clone();
    }
    let scale = size as f64 / short as f64;
    let (nh, nw) = if h <= w {
        (size, ((w as f64 * scale).round() as usize).max(size))
    } else {
        (((h as f64 * scale).round() as usize).max(size), size)
    };
    resize(sample, nh, nw)
}

fn resize_crop_with(sample: &Sample, size: usize, mode: CropMode, u: (f64, f64)) -> Sample {
    let resized = resize_short_side(sample, size);
    if resized.height() == size && resized.width() == size {
        return resized;
    }
    let (top, left) = crop_offsets(&resized, size, mode, u);
    Sample {
        id: resized.id.clone(),
        image: resized
            .image
            .slice(s![.., top..top + size, left..left + size])
            .to_owned(),
        mask: resized
            .mask
            .slice(s![top..top + size, left..left + size])
            .to_owned(),
    }
}

/// Scales the short side to `size`, then crops a `size×size` window.
pub fn resize_crop(sample: &Sample, size: usize, mode: CropMode) -> Sample {
    resize_crop_with(sample, size, mode, (0.5, 0.5))
}

/// One random augmentation of `sample`, deterministic in `seed`.
pub fn augment(sample: &Sample, config: &AugmentationConfig, seed: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // all draws happen unconditionally so the stream layout is fixed
    let flip = rng.random::<f64>() < config.horizontal_flip_prob;
    let degrees = draw(&mut rng, config.rotation_range_degrees);
    let brightness = draw(&mut rng, config.brightness_scale_range);
    let contrast = draw(&mut rng, config.contrast_scale_range);
    let crop_u = (rng.random::<f64>(), rng.random::<f64>());

    let mut out = if flip {
        flip_horizontal(sample)
    } else {
        sample.clone()
    };
    if degrees != 0.0 {
        out = rotate(&out, degrees);
    }
    photometric(&mut out.image, brightness, contrast);
    let out = resize_crop_with(&out, config.output_size, config.crop, crop_u);
    debug_assert!(out.validate().is_ok());
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::make_synthetic_dataset;

    fn asym_sample(size: usize) -> Sample {
        let image = Array3::from_shape_fn((3, size, size), |(c, y, x)| {
            ((c * 7 + y * 3 + x * 5) % 17) as f32 / 17.0
        });
        let mask = Array2::from_shape_fn((size, size), |(y, x)| {
            ((y > 10 && y < 30 && x > 5 && x < 20) || (y > 40 && x > 40 && x < 44)) as u8
        });
        Sample::new("asym", image, mask).unwrap()
    }

    #[test]
    fn identity_configuration() {
        let s = asym_sample(64);
        let out = augment(&s, &AugmentationConfig::identity(64), 123);
        assert_eq!(out, s);
    }

    #[test]
    fn flip_is_an_involution() {
        let s = &make_synthetic_dataset(1, 64, 2).unwrap()[0];
        let cfg = AugmentationConfig {
            horizontal_flip_prob: 1.0,
            ..AugmentationConfig::identity(64)
        };
        let once = augment(s, &cfg, 9);
        assert_ne!(&once, s);
        assert_eq!(&augment(&once, &cfg, 9), s);
    }

    #[test]
    fn quarter_rotations_permute_pixels() {
        let s = asym_sample(64);
        for (deg, map) in [
            (90.0, &(|y: usize, x: usize| (x, 63 - y)) as &dyn Fn(usize, usize) -> (usize, usize)),
            (180.0, &|y, x| (63 - y, 63 - x)),
            (0.0, &|y, x| (y, x)),
        ] {
            let cfg = AugmentationConfig {
                rotation_range_degrees: (deg, deg),
                ..AugmentationConfig::identity(64)
            };
            let out = augment(&s, &cfg, 0);
            for ((y, x), &m) in out.mask.indexed_iter() {
                let (sy, sx) = map(y, x);
                assert_eq!(m, s.mask[[sy, sx]], "{deg} at ({y},{x})");
            }
        }
    }

    #[test]
    fn arbitrary_rotation_keeps_mask_binary() {
        let s = asym_sample(64);
        let cfg = AugmentationConfig {
            rotation_range_degrees: (-37.0, 37.0),
            ..AugmentationConfig::identity(64)
        };
        let out = augment(&s, &cfg, 5);
        assert!(out.mask.iter().all(|&v| v <= 1));
        assert!(out.image.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn photometric_leaves_mask_alone() {
        let s = asym_sample(64);
        let cfg = AugmentationConfig {
            brightness_scale_range: (1.4, 1.4),
            contrast_scale_range: (0.6, 0.6),
            ..AugmentationConfig::identity(64)
        };
        let out = augment(&s, &cfg, 1);
        assert_eq!(out.mask, s.mask);
        assert_ne!(out.image, s.image);
    }

    #[test]
    fn resize_and_crop_to_output_size() {
        let image = Array3::<f32>::from_elem((3, 80, 120), 0.5);
        let mut mask = Array2::zeros((80, 120));
        mask.slice_mut(s![30..50, 50..70]).fill(1);
        let s = Sample::new("r", image, mask).unwrap();
        let out = resize_crop(&s, 64, CropMode::Center);
        assert_eq!(out.mask.dim(), (64, 64));
        assert!(out.image.iter().all(|&v| (v - 0.5).abs() < 1e-6));
        // 20x20 block scaled by 0.8 -> 16x16
        assert_eq!(out.mask.iter().filter(|&&v| v == 1).count(), 256);
        let cfg = AugmentationConfig {
            output_size: 64,
            ..AugmentationConfig::identity(64)
        };
        let a = augment(&s, &AugmentationConfig { crop: CropMode::Random, ..cfg.clone() }, 4);
        let b = augment(&s, &AugmentationConfig { crop: CropMode::Random, ..cfg }, 4);
        assert_eq!(a, b);
    }

    #[test]
    fn validation_flags_each_field() {
        let bad = AugmentationConfig {
            horizontal_flip_prob: 1.5,
            rotation_range_degrees: (-200.0, 10.0),
            brightness_scale_range: (0.0, 1.0),
            contrast_scale_range: (1.2, 1.1),
            output_size: 0,
            crop: CropMode::Center,
        };
        assert_eq!(bad.validate().len(), 5);
        assert!(AugmentationConfig::default().validate().is_empty());
    }
}
