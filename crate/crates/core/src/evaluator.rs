//! Pixel-level precision, recall, F1 and IoU, with per-image-mean and
//! dataset-micro aggregation.

use std::fmt::Write as _;
use std::path::Path;

use image::{ImageBuffer, Rgb, RgbImage};
use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::dataset::{resize_crop, CropMode, Sample};
use crate::losses::sigmoid;
use crate::nn::UNet;
use crate::{par, Error, Mask, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// `1` where `p > threshold`.
pub fn binarize(probabilities: ArrayView2<f64>, threshold: f64) -> Mask {
    probabilities.mapv(|p| (p > threshold) as u8)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Confusion {
    pub fn count(pred: ArrayView2<u8>, gt: ArrayView2<u8>) -> Result<Self> {
        if pred.dim() != gt.dim() {
            return Err(Error::Shape(format!(
                "prediction {:?} vs ground truth {:?}",
                pred.dim(),
                gt.dim()
            )));
        }
        let mut c = Confusion::default();
        for (&p, &g) in pred.iter().zip(gt.iter()) {
            match (p != 0, g != 0) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                _ => {}
            }
        }
        Ok(c)
    }

    fn merge(self, o: Confusion) -> Confusion {
        Confusion {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }

    /// Metrics from counts. An empty prediction gets precision 1 only when
    /// the ground truth is empty too, and symmetrically for recall; F1 and
    /// IoU are 1 when both are empty.
    pub fn metrics(&self) -> Metrics {
        let (tp, fp, fn_) = (self.tp as f64, self.fp as f64, self.fn_ as f64);
        let pred_empty = self.tp + self.fp == 0;
        let gt_empty = self.tp + self.fn_ == 0;
        if pred_empty && gt_empty {
            return Metrics {
                precision: 1.0,
                recall: 1.0,
                f1: 1.0,
                iou: 1.0,
            };
        }
        let precision = if pred_empty { 0.0 } else { tp / (tp + fp) };
        let recall = if gt_empty { 0.0 } else { tp / (tp + fn_) };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Metrics {
            precision,
            recall,
            f1,
            iou: tp / (tp + fp + fn_),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
}

impl Metrics {
    fn mean(items: &[Metrics]) -> Metrics {
        let n = items.len().max(1) as f64;
        let sum = |f: fn(&Metrics) -> f64| items.iter().map(f).sum::<f64>() / n;
        Metrics {
            precision: sum(|m| m.precision),
            recall: sum(|m| m.recall),
            f1: sum(|m| m.f1),
            iou: sum(|m| m.iou),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    PerImageMean,
    DatasetMicro,
}

impl std::str::FromStr for Aggregation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "per-image-mean" | "mean" => Ok(Aggregation::PerImageMean),
            "dataset-micro" | "micro" => Ok(Aggregation::DatasetMicro),
            _ => Err(format!("unknown aggregation '{s}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub id: String,
    #[serde(flatten)]
    pub counts: Confusion,
    #[serde(flatten)]
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub threshold: f64,
    pub aggregation: Aggregation,
    /// Headline values under `aggregation`.
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
    pub per_image_mean: Metrics,
    pub dataset_micro: Metrics,
    pub per_image: Vec<ImageMetrics>,
}

/// Metrics for a single prediction/ground-truth pair.
pub fn compute_metrics(pred: ArrayView2<u8>, gt: ArrayView2<u8>) -> Result<Metrics> {
    Ok(Confusion::count(pred, gt)?.metrics())
}

impl MetricsReport {
    pub fn from_images(per_image: Vec<ImageMetrics>, threshold: f64, aggregation: Aggregation) -> Self {
        let all: Vec<Metrics> = per_image.iter().map(|m| m.metrics).collect();
        let per_image_mean = Metrics::mean(&all);
        let dataset_micro = per_image
            .iter()
            .fold(Confusion::default(), |acc, m| acc.merge(m.counts))
            .metrics();
        let head = match aggregation {
            Aggregation::PerImageMean => per_image_mean,
            Aggregation::DatasetMicro => dataset_micro,
        };
        Self {
            threshold,
            aggregation,
            precision: head.precision,
            recall: head.recall,
            f1: head.f1,
            iou: head.iou,
            per_image_mean,
            dataset_micro,
            per_image,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "threshold {:.3}", self.threshold);
        let _ = writeln!(out, "{:<24} {:>9} {:>9} {:>9} {:>9}", "", "precision", "recall", "f1", "iou");
        for m in &self.per_image {
            row(&mut out, &m.id, &m.metrics);
        }
        let _ = writeln!(out, "{}", "-".repeat(64));
        row(&mut out, "per-image mean", &self.per_image_mean);
        row(&mut out, "dataset micro", &self.dataset_micro);
        out
    }
}

fn row(out: &mut String, label: &str, m: &Metrics) {
    let _ = writeln!(
        out,
        "{:<24} {:>9.4} {:>9.4} {:>9.4} {:>9.4}",
        label, m.precision, m.recall, m.f1, m.iou
    );
}

/// Anything that maps a sample to per-pixel foreground probabilities.
pub trait Segmenter: Sync {
    fn probabilities(&self, sample: &Sample) -> Result<Array2<f64>>;
}

impl Segmenter for UNet {
    fn probabilities(&self, sample: &Sample) -> Result<Array2<f64>> {
        let (_, logits) = self.predict(&sample.image)?;
        let (h, w) = sample.mask.dim();
        let probs = logits.iter().map(|&z| sigmoid(z as f64)).collect();
        Array2::from_shape_vec((h, w), probs).map_err(|e| Error::Shape(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub threshold: f64,
    pub aggregation: Aggregation,
    /// Resize and center-crop inputs to this side first.
    pub input_size: Option<usize>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            aggregation: Aggregation::PerImageMean,
            input_size: None,
        }
    }
}

/// Binary predictions for every sample, at model resolution.
pub fn predict_masks<M: Segmenter + ?Sized>(model: &M, samples: &[Sample], options: &EvalOptions) -> Result<Vec<(Sample, Mask)>> {
    par::map_slice(samples, |s| {
        let s = match options.input_size {
            Some(size) => resize_crop(s, size, CropMode::Center),
            None => s.clone(),
        };
        let probs = model.probabilities(&s)?;
        let pred = binarize(probs.view(), options.threshold);
        Ok((s, pred))
    })
    .into_iter()
    .collect()
}

pub fn evaluate<M: Segmenter + ?Sized>(model: &M, samples: &[Sample], options: &EvalOptions) -> Result<MetricsReport> {
    let preds = predict_masks(model, samples, options)?;
    report_from_predictions(&preds, options)
}

pub fn report_from_predictions(preds: &[(Sample, Mask)], options: &EvalOptions) -> Result<MetricsReport> {
    let per_image = preds
        .iter()
        .map(|(s, pred)| {
            let counts = Confusion::count(pred.view(), s.mask.view())?;
            Ok(ImageMetrics {
                id: s.id.clone(),
                counts,
                metrics: counts.metrics(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport::from_images(per_image, options.threshold, options.aggregation))
}

/// RGB overlay: ground truth in red, prediction in green (overlap yellow),
/// on a dimmed copy of the input.
pub fn overlay(sample: &Sample, pred: &Mask) -> RgbImage {
    let (h, w) = sample.mask.dim();
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let (y, x) = (y as usize, x as usize);
        let base = |c: usize| (sample.image[[c, y, x]].clamp(0.0, 1.0) * 0.4 * 255.0) as u8;
        let mut px = [base(0), base(1), base(2)];
        if sample.mask[[y, x]] != 0 {
            px[0] = 255;
        }
        if pred[[y, x]] != 0 {
            px[1] = 255;
        }
        Rgb(px)
    })
}

pub fn write_overlays(preds: &[(Sample, Mask)], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (s, pred) in preds {
        let path = dir.join(format!("{}_overlay.png", s.id));
        overlay(s, pred).save(&path).map_err(|source| Error::Image { path, source })?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, Array3};

    #[test]
    fn binarize_ties_and_extremes() {
        let p = arr2(&[[0.5, 0.50001], [0.0, 1.0]]);
        assert_eq!(binarize(p.view(), 0.5), arr2(&[[0, 1], [0, 1]]));
        assert_eq!(binarize(p.view(), 0.0), arr2(&[[1, 1], [0, 1]]));
        assert_eq!(binarize(p.view(), 1.0), arr2(&[[0, 0], [0, 0]]));
    }

    #[test]
    fn perfect_and_disjoint() {
        let gt = arr2(&[[1u8, 1, 0], [0, 0, 0]]);
        let m = compute_metrics(gt.view(), gt.view()).unwrap();
        assert_eq!((m.precision, m.recall, m.f1, m.iou), (1.0, 1.0, 1.0, 1.0));
        let other = arr2(&[[0u8, 0, 1], [1, 0, 0]]);
        let m = compute_metrics(other.view(), gt.view()).unwrap();
        assert_eq!((m.precision, m.recall, m.f1, m.iou), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn superset_prediction() {
        let gt = arr2(&[[1u8, 1, 0, 0]]);
        let pred = arr2(&[[1u8, 1, 1, 1]]);
        let m = compute_metrics(pred.view(), gt.view()).unwrap();
        assert_eq!(m.precision, 0.5);
        assert_eq!(m.recall, 1.0);
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.iou, 0.5);
    }

    #[test]
    fn empty_conventions() {
        let z = Array2::<u8>::zeros((2, 2));
        let one = arr2(&[[1u8, 0], [0, 0]]);
        let both = compute_metrics(z.view(), z.view()).unwrap();
        assert_eq!((both.precision, both.recall, both.f1, both.iou), (1.0, 1.0, 1.0, 1.0));
        let miss = compute_metrics(z.view(), one.view()).unwrap();
        assert_eq!((miss.precision, miss.recall, miss.f1, miss.iou), (0.0, 0.0, 0.0, 0.0));
        let spurious = compute_metrics(one.view(), z.view()).unwrap();
        assert_eq!((spurious.precision, spurious.recall, spurious.f1, spurious.iou), (0.0, 0.0, 0.0, 0.0));
        assert!(compute_metrics(z.view(), Array2::<u8>::zeros((3, 2)).view()).is_err());
    }

    fn counts(tp: u64, fp: u64, fn_: u64, id: &str) -> ImageMetrics {
        let counts = Confusion { tp, fp, fn_ };
        ImageMetrics {
            id: id.into(),
            counts,
            metrics: counts.metrics(),
        }
    }

    #[test]
    fn micro_versus_mean_by_hand() {
        // image a: P=8/10, R=8/12 ; image b: P=1/4, R=1/2
        let report = MetricsReport::from_images(
            vec![counts(8, 2, 4, "a"), counts(1, 3, 1, "b")],
            0.5,
            Aggregation::DatasetMicro,
        );
        assert!((report.precision - 9.0 / 14.0).abs() < 1e-12);
        assert!((report.recall - 9.0 / 14.0).abs() < 1e-12);
        assert!((report.iou - 9.0 / 19.0).abs() < 1e-12);
        let mean = report.per_image_mean;
        assert!((mean.precision - (0.8 + 0.25) / 2.0).abs() < 1e-12);
        assert!((mean.recall - (8.0 / 12.0 + 0.5) / 2.0).abs() < 1e-12);
        assert!((mean.iou - (8.0 / 14.0 + 0.2) / 2.0).abs() < 1e-12);
        let f1a = 2.0 * 0.8 * (8.0 / 12.0) / (0.8 + 8.0 / 12.0);
        let f1b = 2.0 * 0.25 * 0.5 / 0.75;
        assert!((mean.f1 - (f1a + f1b) / 2.0).abs() < 1e-12);
    }

    struct Oracle;
    impl Segmenter for Oracle {
        fn probabilities(&self, s: &Sample) -> Result<Array2<f64>> {
            Ok(s.mask.mapv(|v| v as f64))
        }
    }

    struct Blank;
    impl Segmenter for Blank {
        fn probabilities(&self, s: &Sample) -> Result<Array2<f64>> {
            Ok(Array2::zeros(s.mask.dim()))
        }
    }

    #[test]
    fn evaluate_with_stub_models() {
        let samples = crate::dataset::make_synthetic_dataset(3, 64, 4).unwrap();
        let opts = EvalOptions::default();
        let r = evaluate(&Oracle, &samples, &opts).unwrap();
        assert_eq!((r.precision, r.recall, r.f1, r.iou), (1.0, 1.0, 1.0, 1.0));
        let r = evaluate(&Blank, &samples, &opts).unwrap();
        assert_eq!(r.recall, 0.0);
        assert_eq!(r.per_image.len(), 3);
        assert!(r.to_table().contains("dataset micro"));
        let json: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(json["aggregation"], "per-image-mean");
        assert!(json["per_image"][0]["fn"].as_u64().unwrap() > 0);
    }

    #[test]
    fn overlay_colors() {
        let s = Sample::new("o", Array3::zeros((3, 1, 3)), arr2(&[[1u8, 1, 0]])).unwrap();
        let img = overlay(&s, &arr2(&[[1u8, 0, 1]]));
        assert_eq!(img.get_pixel(0, 0).0, [255, 255, 0]);
        assert_eq!(img.get_pixel(1, 0).0, [255, 0, 0]);
        assert_eq!(img.get_pixel(2, 0).0, [0, 255, 0]);
    }
}
