//! Fundus-like synthetic images with bright elliptical "exudate" blobs.
//!
//! The background is a dark, vignetted circular field with pixel noise,
//! a few darker vessel-like arcs and a moderately bright optic disc. Blobs
//! add a fixed positive offset to every channel, so the mask is exactly the
//! set of pixels that differ from the background layer.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Sample;
use crate::{par, Error, Mask, Result};

pub const MIN_BLOB_RADIUS: f64 = 1.0;
pub const MAX_BLOB_RADIUS: f64 = 20.0;
/// Accepted per-image foreground proportion band.
pub const PROPORTION_BAND: (f64, f64) = (0.001, 0.2);
const BLOB_BOOST: [f32; 3] = [0.35, 0.33, 0.15];

/// The pieces a synthetic sample is assembled from.
#[derive(Debug, Clone)]
pub struct SyntheticLayers {
    pub background: Array3<f32>,
    pub mask: Mask,
}

impl SyntheticLayers {
    pub fn compose(&self) -> Array3<f32> {
        let mut img = self.background.clone();
        for (c, boost) in BLOB_BOOST.iter().enumerate() {
            let mut plane = img.index_axis_mut(ndarray::Axis(0), c);
            plane.zip_mut_with(&self.mask, |v, &m| {
                if m != 0 {
                    *v = (*v + boost).min(1.0);
                }
            });
        }
        img
    }
}

fn background(size: usize, rng: &mut ChaCha8Rng) -> (Array3<f32>, (f64, f64, f64)) {
    let s = size as f64;
    let center = (
        s / 2.0 + rng.random_range(-0.02..0.02) * s,
        s / 2.0 + rng.random_range(-0.02..0.02) * s,
    );
    let radius = s * rng.random_range(0.44..0.48);
    let tint: [f32; 3] = [
        rng.random_range(0.40..0.50),
        rng.random_range(0.15..0.22),
        rng.random_range(0.05..0.10),
    ];
    let disc_angle = rng.random_range(0.0..std::f64::consts::TAU);
    let disc = (
        center.0 + 0.55 * radius * disc_angle.sin(),
        center.1 + 0.55 * radius * disc_angle.cos(),
        radius * 0.16,
    );
    let vessels: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.5..2.0),
                rng.random_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let noise: Vec<f32> = (0..size * size).map(|_| rng.random_range(-0.02..0.02)).collect();

    let mut img = Array3::<f32>::zeros((3, size, size));
    for y in 0..size {
        for x in 0..size {
            let (dy, dx) = (y as f64 + 0.5 - center.0, x as f64 + 0.5 - center.1);
            let r = (dy * dy + dx * dx).sqrt() / radius;
            if r > 1.0 {
                for c in 0..3 {
                    img[[c, y, x]] = 0.02;
                }
                continue;
            }
            let mut shade = (1.0 - 0.35 * r * r) as f32;
            let theta = dy.atan2(dx);
            if vessels.iter().any(|&(a, freq, phase)| {
                let wobble = 0.15 * (freq * r * 6.0 + phase).sin();
                let d = (theta - a + wobble).sin().abs() * r * radius;
                d < 0.9 && r > 0.1
            }) {
                shade *= 0.75;
            }
            let dd = ((y as f64 - disc.0).powi(2) + (x as f64 - disc.1).powi(2)).sqrt();
            let in_disc = dd < disc.2;
            let n = noise[y * size + x];
            for c in 0..3 {
                let base = if in_disc {
                    [0.60f32, 0.42, 0.22][c] * (1.0 - 0.2 * (dd / disc.2) as f32)
                } else {
                    tint[c] * shade
                };
                img[[c, y, x]] = (base + n).clamp(0.0, 0.64);
            }
        }
    }
    (img, (center.0, center.1, radius))
}

fn blobs(size: usize, field: (f64, f64, f64), rng: &mut ChaCha8Rng) -> Mask {
    let (cy, cx, radius) = field;
    let mut mask = Array2::<u8>::zeros((size, size));
    let count = rng.random_range(2..=12usize);
    for _ in 0..count {
        let u: f64 = rng.random();
        let major = MIN_BLOB_RADIUS + (MAX_BLOB_RADIUS - MIN_BLOB_RADIUS) * u * u * u;
        let minor = major * rng.random_range(0.5..=1.0);
        let angle = rng.random_range(0.0..std::f64::consts::PI);
        let reach = (radius - major - 2.0).max(0.0);
        let rho = reach * rng.random::<f64>().sqrt();
        let phi = rng.random_range(0.0..std::f64::consts::TAU);
        let (by, bx) = (cy + rho * phi.sin(), cx + rho * phi.cos());
        let (sin, cos) = angle.sin_cos();
        let lo_y = (by - major - 1.0).floor().max(0.0) as usize;
        let hi_y = ((by + major + 1.0).ceil() as usize).min(size - 1);
        let lo_x = (bx - major - 1.0).floor().max(0.0) as usize;
        let hi_x = ((bx + major + 1.0).ceil() as usize).min(size - 1);
        for y in lo_y..=hi_y {
            for x in lo_x..=hi_x {
                let (dy, dx) = (y as f64 + 0.5 - by, x as f64 + 0.5 - bx);
                let u = (dx * cos + dy * sin) / major;
                let v = (-dx * sin + dy * cos) / minor;
                if u * u + v * v <= 1.0 {
                    mask[[y, x]] = 1;
                }
            }
        }
    }
    mask
}

/// Background and mask for sample `index` of the dataset seeded by `seed`.
pub fn synthetic_sample_layers(index: usize, image_size: usize, seed: u64) -> SyntheticLayers {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let (background, field) = background(image_size, &mut rng);
    let total = (image_size * image_size) as f64;
    loop {
        let mask = blobs(image_size, field, &mut rng);
        let p = mask.iter().filter(|&&v| v != 0).count() as f64 / total;
        if (PROPORTION_BAND.0..=PROPORTION_BAND.1).contains(&p) {
            return SyntheticLayers { background, mask };
        }
    }
}

/// `count` synthetic samples of `image_size×image_size`, ids `syn_0000`…
pub fn make_synthetic_dataset(count: usize, image_size: usize, seed: u64) -> Result<Vec<Sample>> {
    if count == 0 || image_size < 64 {
        return Err(Error::InvalidConfig(vec![format!(
            "synthetic dataset needs count >= 1 and image_size >= 64 (got {count}, {image_size})"
        )]));
    }
    par::map_range(count, |i| {
        let layers = synthetic_sample_layers(i, image_size, seed);
        Sample::new(format!("syn_{i:04}"), layers.compose(), layers.mask)
    })
    .into_iter()
    .collect()
}
