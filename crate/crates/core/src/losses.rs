//! Global BCE term, the supervised contrastive core, and the two patch-wise
//! contrastive objectives built on it.
//!
//! The contrastive losses return analytic gradients with respect to every
//! current-batch feature vector alongside the value. Bank features are
//! treated as constants.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::features::{check_normalized, FeatureTag, PooledFeature};
use crate::{Error, Result};

/// Probability clamp used by the BCE term.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    pub temperature: f64,
    /// Weight of the patch-wise density loss.
    pub alpha: f64,
    /// Weight of the patch-wise edge-aware loss.
    pub beta: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            temperature: 0.05,
            alpha: 0.02,
            beta: 0.1,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            errs.push(format!("loss.tau must be > 0, got {}", self.temperature));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            errs.push(format!("loss.alpha must be >= 0, got {}", self.alpha));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            errs.push(format!("loss.beta must be >= 0, got {}", self.beta));
        }
        errs
    }

    /// Same temperature, both contrastive weights zeroed.
    pub fn bce_only(self) -> Self {
        Self {
            alpha: 0.0,
            beta: 0.0,
            ..self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_sup: f64,
    pub l_pd: f64,
    pub l_pe: f64,
    pub total: f64,
}

/// `l_sup + α·l_pd + β·l_pe`.
pub fn total_loss(l_sup: f64, l_pd: f64, l_pe: f64, config: &ContrastiveConfig) -> Result<LossBreakdown> {
    for (component, value) in [("l_sup", l_sup), ("l_pd", l_pd), ("l_pe", l_pe)] {
        if !value.is_finite() {
            return Err(Error::NonFinite { component, value });
        }
    }
    Ok(LossBreakdown {
        l_sup,
        l_pd,
        l_pe,
        total: l_sup + config.alpha * l_pd + config.beta * l_pe,
    })
}

#[inline]
fn bce_term(p: f64, t: u8) -> f64 {
    let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
    if t != 0 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Mean binary cross-entropy between probabilities and binary targets.
pub fn bce_loss(predictions: ArrayView2<f64>, targets: ArrayView2<u8>) -> Result<f64> {
    if predictions.dim() != targets.dim() {
        return Err(Error::Shape(format!(
            "predictions {:?} vs targets {:?}",
            predictions.dim(),
            targets.dim()
        )));
    }
    let n = predictions.len().max(1) as f64;
    Ok(predictions
        .iter()
        .zip(targets.iter())
        .map(|(&p, &t)| bce_term(p, t))
        .sum::<f64>()
        / n)
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// BCE on `sigmoid(logits)` averaged over every element, plus the gradient
/// with respect to each logit. Clamped probabilities pass no gradient.
pub fn bce_from_logits(logits: &[f32], targets: &[u8]) -> Result<(f64, Vec<f32>)> {
    if logits.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} logits vs {} targets",
            logits.len(),
            targets.len()
        )));
    }
    let n = logits.len().max(1) as f64;
    let mut sum = 0.0;
    let grad = logits
        .iter()
        .zip(targets)
        .map(|(&z, &t)| {
            let p = sigmoid(z as f64);
            sum += bce_term(p, t);
            if !(BCE_EPS..=1.0 - BCE_EPS).contains(&p) {
                0.0
            } else {
                ((p - (t != 0) as u8 as f64) / n) as f32
            }
        })
        .collect();
    Ok((sum / n, grad))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    (dot(a, b) / (norm(a) * norm(b))).clamp(-1.0, 1.0)
}

/// `log Σ exp(x)` with max shift.
fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Supervised contrastive term for one anchor: the mean over positives of
/// the negative log-softmax over `positives ∪ negatives`, with cosine
/// similarities scaled by `1/τ`.
///
/// `Ok(None)` when there are no positives: the anchor contributes nothing.
pub fn supcon_term<A: AsRef<[f64]>, B: AsRef<[f64]>>(
    anchor: &[f64],
    positives: &[A],
    negatives: &[B],
    temperature: f64,
) -> Result<Option<f64>> {
    check_normalized(anchor)?;
    for v in positives.iter().map(AsRef::as_ref).chain(negatives.iter().map(AsRef::as_ref)) {
        check_normalized(v)?;
    }
    if positives.is_empty() {
        return Ok(None);
    }
    let pos: Vec<f64> = positives
        .iter()
        .map(|q| cosine_similarity(q.as_ref(), anchor) / temperature)
        .collect();
    let neg = negatives
        .iter()
        .map(|k| cosine_similarity(k.as_ref(), anchor) / temperature);
    let lse = log_sum_exp(pos.iter().copied().chain(neg));
    let mean_pos = pos.iter().sum::<f64>() / pos.len() as f64;
    Ok(Some(lse - mean_pos))
}

/// Value of a batch-level contrastive loss plus its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveLoss {
    pub value: f64,
    /// Anchors that contributed (had the required positives/negatives).
    pub anchors: usize,
    /// `∂value/∂v` for each current-batch vector, in input order.
    pub grads: Vec<Vec<f64>>,
}

impl ContrastiveLoss {
    fn zero(n: usize, dim: usize) -> Self {
        Self {
            value: 0.0,
            anchors: 0,
            grads: vec![vec![0.0; dim]; n],
        }
    }
}

struct Anchor {
    index: usize,
    positives: Vec<usize>,
    negatives: Vec<usize>,
}

/// Sum over anchors of [`supcon_term`], and its gradient with respect to all
/// `vectors`, divided by the anchor count.
fn mean_over_anchors(vectors: &[&[f64]], anchors: &[Anchor], temperature: f64) -> (f64, Vec<Vec<f64>>) {
    let n = vectors.len();
    let dim = vectors.first().map_or(0, |v| v.len());
    let mut grads = vec![vec![0.0; dim]; n];
    if anchors.is_empty() {
        return (0.0, grads);
    }
    let norms: Vec<f64> = vectors.iter().map(|v| norm(v)).collect();
    let mut total = 0.0;
    let scale = 1.0 / anchors.len() as f64;
    let mut logits = Vec::new();
    for anchor in anchors {
        let a = anchor.index;
        let members: Vec<usize> = anchor
            .positives
            .iter()
            .chain(&anchor.negatives)
            .copied()
            .collect();
        let sims: Vec<f64> = members
            .iter()
            .map(|&k| (dot(vectors[k], vectors[a]) / (norms[k] * norms[a])).clamp(-1.0, 1.0))
            .collect();
        logits.clear();
        logits.extend(sims.iter().map(|s| s / temperature));
        let lse = log_sum_exp(logits.iter().copied());
        let n_pos = anchor.positives.len();
        let mean_pos = logits[..n_pos].iter().sum::<f64>() / n_pos as f64;
        total += lse - mean_pos;

        for (j, &k) in members.iter().enumerate() {
            let softmax = (logits[j] - lse).exp();
            let indicator = if j < n_pos { 1.0 / n_pos as f64 } else { 0.0 };
            // ∂term/∂sim(k, a)
            let g = scale * (softmax - indicator) / temperature;
            if g == 0.0 {
                continue;
            }
            let s = sims[j];
            let inv = 1.0 / (norms[k] * norms[a]);
            let (nk2, na2) = (norms[k] * norms[k], norms[a] * norms[a]);
            for c in 0..dim {
                let (xk, xa) = (vectors[k][c], vectors[a][c]);
                grads[k][c] += g * (xa * inv - s * xk / nk2);
                grads[a][c] += g * (xk * inv - s * xa / na2);
            }
        }
    }
    (total * scale, grads)
}

fn density_group(tag: FeatureTag) -> Option<bool> {
    match tag {
        FeatureTag::Dense => Some(true),
        FeatureTag::Sparse => Some(false),
        _ => None,
    }
}

/// Patch-wise density loss.
///
/// Every dense/sparse feature in `batch` is an anchor; its positives are the
/// other same-class features in `batch ∪ candidates`, its negatives the
/// opposite class. `candidates` (bank samples) are never anchors and get no
/// gradient; any candidate sharing a source with a batch feature is dropped.
/// Anchors without a positive or without a negative are skipped, and the
/// mean runs over the remaining anchors.
pub fn density_loss(
    batch: &[PooledFeature],
    candidates: &[PooledFeature],
    temperature: f64,
) -> Result<ContrastiveLoss> {
    for f in batch.iter().chain(candidates) {
        check_normalized(&f.vector)?;
    }
    let dim = batch.first().map_or(0, |f| f.vector.len());
    let mut pool: Vec<&PooledFeature> = batch.iter().collect();
    pool.extend(
        candidates
            .iter()
            .filter(|c| !batch.iter().any(|b| b.source == c.source)),
    );
    let anchors: Vec<Anchor> = batch
        .iter()
        .enumerate()
        .filter_map(|(a, f)| {
            let group = density_group(f.tag)?;
            let (mut positives, mut negatives) = (Vec::new(), Vec::new());
            for (k, g) in pool.iter().enumerate() {
                match density_group(g.tag) {
                    Some(same) if same == group && k != a => positives.push(k),
                    Some(same) if same != group => negatives.push(k),
                    _ => {}
                }
            }
            (!positives.is_empty() && !negatives.is_empty()).then_some(Anchor {
                index: a,
                positives,
                negatives,
            })
        })
        .collect();
    if anchors.is_empty() {
        return Ok(ContrastiveLoss::zero(batch.len(), dim));
    }
    let vectors: Vec<&[f64]> = pool.iter().map(|f| f.vector.as_slice()).collect();
    let (value, mut grads) = mean_over_anchors(&vectors, &anchors, temperature);
    grads.truncate(batch.len());
    Ok(ContrastiveLoss {
        value,
        anchors: anchors.len(),
        grads,
    })
}

/// Patch-wise edge-aware loss over one mini-batch.
///
/// Every edge and background feature is an anchor; positives are the other
/// features of the same kind, negatives all features of the other kind.
/// Anchors with no positive are skipped. Gradients are returned for `edge`
/// followed by `background`.
pub fn edge_loss<E: AsRef<[f64]>, B: AsRef<[f64]>>(
    edge: &[E],
    background: &[B],
    temperature: f64,
) -> Result<ContrastiveLoss> {
    let vectors: Vec<&[f64]> = edge
        .iter()
        .map(AsRef::as_ref)
        .chain(background.iter().map(AsRef::as_ref))
        .collect();
    for v in &vectors {
        check_normalized(v)?;
    }
    let dim = vectors.first().map_or(0, |v| v.len());
    let n_edge = edge.len();
    let anchors: Vec<Anchor> = (0..vectors.len())
        .filter_map(|a| {
            let is_edge = a < n_edge;
            let (mut positives, mut negatives) = (Vec::new(), Vec::new());
            for k in 0..vectors.len() {
                if k == a {
                    continue;
                }
                if (k < n_edge) == is_edge {
                    positives.push(k);
                } else {
                    negatives.push(k);
                }
            }
            (!positives.is_empty()).then_some(Anchor {
                index: a,
                positives,
                negatives,
            })
        })
        .collect();
    if anchors.is_empty() {
        return Ok(ContrastiveLoss::zero(vectors.len(), dim));
    }
    let (value, grads) = mean_over_anchors(&vectors, &anchors, temperature);
    Ok(ContrastiveLoss {
        value,
        anchors: anchors.len(),
        grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{Region, SourceId};
    use approx::assert_abs_diff_eq;
    use ndarray::{arr2, Array2};

    fn unit(v: &[f64]) -> Vec<f64> {
        let n = norm(v);
        v.iter().map(|x| x / n).collect()
    }

    fn tagged(v: &[f64], tag: FeatureTag, id: usize) -> PooledFeature {
        PooledFeature {
            vector: unit(v),
            tag,
            source: SourceId {
                sample: "img".into(),
                region: Region::Patch(id),
            },
        }
    }

    #[test]
    fn total_loss_weights() {
        let cfg = ContrastiveConfig::default();
        let b = total_loss(0.5, 1.0, 2.0, &cfg).unwrap();
        assert_abs_diff_eq!(b.total, 0.72, epsilon = 1e-12);
        let b = total_loss(0.4, 3.0, 7.0, &cfg.bce_only()).unwrap();
        assert_eq!(b.total, 0.4);
        assert_eq!(total_loss(0.0, 0.0, 0.0, &cfg).unwrap().total, 0.0);
        let err = total_loss(0.1, f64::NAN, 0.0, &cfg).unwrap_err();
        assert!(err.to_string().contains("l_pd"));
    }

    #[test]
    fn config_validation() {
        let bad = ContrastiveConfig {
            temperature: 0.0,
            alpha: -1.0,
            beta: 0.1,
        };
        assert_eq!(bad.validate().len(), 2);
        assert!(ContrastiveConfig::default().validate().is_empty());
    }

    #[test]
    fn bce_fixtures() {
        let t = arr2(&[[1u8, 0], [0, 1]]);
        let perfect = t.mapv(|v| v as f64);
        assert!(bce_loss(perfect.view(), t.view()).unwrap() <= 1e-6);
        let half = Array2::from_elem((2, 2), 0.5);
        assert_abs_diff_eq!(bce_loss(half.view(), t.view()).unwrap(), 2f64.ln(), epsilon = 1e-12);
        assert!(bce_loss(half.view(), arr2(&[[1u8]]).view()).is_err());
    }

    #[test]
    fn bce_logit_gradient() {
        let logits = [0.3f32, -1.2, 2.0, 0.0];
        let targets = [1u8, 0, 0, 1];
        let (loss, grad) = bce_from_logits(&logits, &targets).unwrap();
        let probs = Array2::from_shape_fn((1, 4), |(_, i)| sigmoid(logits[i] as f64));
        let t = Array2::from_shape_vec((1, 4), targets.to_vec()).unwrap();
        assert_abs_diff_eq!(loss, bce_loss(probs.view(), t.view()).unwrap(), epsilon = 1e-12);
        for i in 0..4 {
            let want = (sigmoid(logits[i] as f64) - targets[i] as f64) / 4.0;
            assert_abs_diff_eq!(grad[i] as f64, want, epsilon = 1e-7);
        }
        let (_, g) = bce_from_logits(&[60.0], &[0]).unwrap();
        assert_eq!(g[0], 0.0);
    }

    #[test]
    fn supcon_two_point() {
        let a = [1.0, 0.0];
        let v = supcon_term(&a, &[[1.0, 0.0]], &[[0.0, 1.0]], 1.0).unwrap().unwrap();
        let e = std::f64::consts::E;
        assert_abs_diff_eq!(v, -(e / (e + 1.0)).ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(v, 0.31326168751822286, epsilon = 1e-12);
        // sharper temperature lowers the loss when the positive is closer
        let sharp = supcon_term(&a, &[[1.0, 0.0]], &[[0.0, 1.0]], 0.5).unwrap().unwrap();
        assert!(sharp < v);
    }

    #[test]
    fn supcon_identical_vectors() {
        let a = unit(&[1.0, 2.0, 3.0]);
        let v = supcon_term(&a, &[a.clone(), a.clone()], &[a.clone(), a.clone(), a.clone()], 0.05)
            .unwrap()
            .unwrap();
        assert_abs_diff_eq!(v, 5f64.ln(), epsilon = 1e-9);
        let lone = supcon_term::<_, Vec<f64>>(&a, std::slice::from_ref(&a), &[], 0.05).unwrap().unwrap();
        assert_abs_diff_eq!(lone, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn supcon_skip_and_errors() {
        let a = [1.0, 0.0];
        let none: &[[f64; 2]] = &[];
        assert_eq!(supcon_term(&a, none, &[[0.0, 1.0]], 1.0).unwrap(), None);
        assert!(matches!(
            supcon_term(&[2.0, 0.0], &[[1.0, 0.0]], none, 1.0),
            Err(Error::Unnormalized { .. })
        ));
    }

    #[test]
    fn density_degenerate_and_identical() {
        let only_sparse: Vec<_> = (0..3).map(|i| tagged(&[1.0, i as f64], FeatureTag::Sparse, i)).collect();
        let l = density_loss(&only_sparse, &[], 0.05).unwrap();
        assert_eq!((l.value, l.anchors), (0.0, 0));

        let v = [0.3, 0.4, 0.5];
        let batch = vec![
            tagged(&v, FeatureTag::Dense, 0),
            tagged(&v, FeatureTag::Dense, 1),
            tagged(&v, FeatureTag::Sparse, 2),
            tagged(&v, FeatureTag::Sparse, 3),
        ];
        let l = density_loss(&batch, &[], 0.05).unwrap();
        assert_eq!(l.anchors, 4);
        assert_abs_diff_eq!(l.value, 3f64.ln(), epsilon = 1e-9);
    }

    #[test]
    fn density_drops_candidates_sharing_a_source() {
        let batch = vec![
            tagged(&[1.0, 0.0], FeatureTag::Dense, 0),
            tagged(&[0.0, 1.0], FeatureTag::Sparse, 1),
        ];
        // same source as batch[0]: would otherwise be a positive for it
        let stale = tagged(&[0.9, 0.1], FeatureTag::Dense, 0);
        let l = density_loss(&batch, &[stale], 0.05).unwrap();
        assert_eq!(l.anchors, 0);
    }

    #[test]
    fn edge_fixtures() {
        let v = unit(&[1.0, 1.0]);
        let l = edge_loss(std::slice::from_ref(&v), std::slice::from_ref(&v), 0.05).unwrap();
        assert_eq!((l.value, l.anchors), (0.0, 0));
        let l = edge_loss(&[v.clone(), v.clone()], &[v.clone(), v.clone()], 0.05).unwrap();
        assert_eq!(l.anchors, 4);
        assert_abs_diff_eq!(l.value, 3f64.ln(), epsilon = 1e-9);
        assert_eq!(l.grads.len(), 4);
    }
}
