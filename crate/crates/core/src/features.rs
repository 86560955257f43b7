//! Masked average pooling of activation maps and the FIFO feature bank.

use std::collections::VecDeque;

use ndarray::{ArrayView2, ArrayView3, ArrayViewMut3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::patching::DensityClass;
use crate::{Error, Result};

/// Tolerance on `‖v‖₂ − 1` accepted by the bank and the contrastive losses.
pub const NORM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureTag {
    Dense,
    Sparse,
    Edge,
    Background,
}

impl From<DensityClass> for FeatureTag {
    fn from(c: DensityClass) -> Self {
        match c {
            DensityClass::Dense => FeatureTag::Dense,
            DensityClass::Sparse => FeatureTag::Sparse,
        }
    }
}

/// Which region of which sample a feature was pooled from.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Region {
    Patch(usize),
    InnerContour,
    OuterContour,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SourceId {
    pub sample: String,
    pub region: Region,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledFeature {
    /// Unit-norm feature vector.
    pub vector: Vec<f64>,
    pub tag: FeatureTag,
    pub source: SourceId,
}

/// Result of pooling one non-empty region. Keeps what the backward pass
/// needs.
#[derive(Debug, Clone, PartialEq)]
pub struct Pooled {
    /// L2-normalized mean feature.
    pub vector: Vec<f64>,
    /// Norm of the mean before normalization.
    pub norm: f64,
    /// Number of mask pixels.
    pub mass: usize,
}

fn check_shapes(activations: &ArrayView3<f32>, mask: &ArrayView2<u8>) -> Result<()> {
    let (_, h, w) = activations.dim();
    if (h, w) != mask.dim() {
        return Err(Error::Shape(format!(
            "activations are {h}x{w} but mask is {:?}",
            mask.dim()
        )));
    }
    Ok(())
}

/// Averages the `C×H×W` activations over the pixels where `mask` is set,
/// then L2-normalizes. `Ok(None)` means the region is empty (or pools to
/// the zero vector) and must be skipped by the caller.
pub fn masked_average_pool(
    activations: ArrayView3<f32>,
    mask: ArrayView2<u8>,
) -> Result<Option<Pooled>> {
    check_shapes(&activations, &mask)?;
    let mass = mask.iter().filter(|&&m| m != 0).count();
    if mass == 0 {
        return Ok(None);
    }
    let mut mean: Vec<f64> = activations
        .axis_iter(Axis(0))
        .map(|plane| {
            plane
                .iter()
                .zip(mask.iter())
                .filter(|(_, &m)| m != 0)
                .map(|(&a, _)| a as f64)
                .sum::<f64>()
                / mass as f64
        })
        .collect();
    let norm = l2_norm(&mean);
    if norm < 1e-12 {
        return Ok(None);
    }
    mean.iter_mut().for_each(|v| *v /= norm);
    Ok(Some(Pooled {
        vector: mean,
        norm,
        mass,
    }))
}

/// Accumulates `∂L/∂activations` given `∂L/∂vector` for a region pooled
/// with [`masked_average_pool`].
pub fn masked_average_pool_backward(
    pooled: &Pooled,
    grad_vector: &[f64],
    mask: ArrayView2<u8>,
    mut grad_activations: ArrayViewMut3<f32>,
) {
    // d normalize(m) / dm = (I - f fᵀ) / ‖m‖
    let f = &pooled.vector;
    let dot: f64 = f.iter().zip(grad_vector).map(|(a, b)| a * b).sum();
    let scale = 1.0 / (pooled.norm * pooled.mass as f64);
    for (c, mut plane) in grad_activations.axis_iter_mut(Axis(0)).enumerate() {
        let g = ((grad_vector[c] - dot * f[c]) * scale) as f32;
        if g == 0.0 {
            continue;
        }
        for (a, &m) in plane.iter_mut().zip(mask.iter()) {
            if m != 0 {
                *a += g;
            }
        }
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn check_normalized(v: &[f64]) -> Result<()> {
    let norm = l2_norm(v);
    if (norm - 1.0).abs() > NORM_TOLERANCE || !norm.is_finite() {
        return Err(Error::Unnormalized { norm });
    }
    Ok(())
}

/// Bounded FIFO of detached feature snapshots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryBank {
    capacity: usize,
    entries: VecDeque<PooledFeature>,
}

impl MemoryBank {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            entries: VecDeque::with_capacity(capacity.min(4096)),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &PooledFeature> {
        self.entries.iter()
    }

    /// Appends in order, evicting the oldest entries past capacity. Rejects
    /// the whole batch if any vector is not unit-norm.
    pub fn push(&mut self, features: impl IntoIterator<Item = PooledFeature>) -> Result<()> {
        let features: Vec<_> = features.into_iter().collect();
        for f in &features {
            check_normalized(&f.vector)?;
        }
        for f in features {
            if self.capacity == 0 {
                break;
            }
            if self.entries.len() == self.capacity {
                self.entries.pop_front();
            }
            self.entries.push_back(f);
        }
        Ok(())
    }

    /// Uniform sample without replacement of up to `max_count` entries
    /// satisfying `predicate`, deterministic in `seed`. Returned in bank
    /// order.
    pub fn sample(
        &self,
        predicate: impl Fn(&PooledFeature) -> bool,
        max_count: usize,
        seed: u64,
    ) -> Vec<PooledFeature> {
        let matching: Vec<&PooledFeature> = self.entries.iter().filter(|f| predicate(f)).collect();
        if matching.len() <= max_count {
            return matching.into_iter().cloned().collect();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked = rand::seq::index::sample(&mut rng, matching.len(), max_count).into_vec();
        picked.sort_unstable();
        picked.into_iter().map(|i| matching[i].clone()).collect()
    }
}
