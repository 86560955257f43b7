//! Training loop: forward, BCE, region pooling, contrastive losses, Adam.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::s;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::dataset::{augment, Sample};
use crate::features::{
    masked_average_pool, masked_average_pool_backward, FeatureTag, MemoryBank, Pooled, PooledFeature, Region, SourceId,
};
use crate::losses::{bce_from_logits, density_loss, edge_loss, total_loss, LossBreakdown};
use crate::morphology::compose_contours;
use crate::nn::{Adam, FeatureMap, Gradients, UNet};
use crate::patching::{partition, Window};
use crate::{par, Error, Mask, Result};

/// `lr_initial · decay_factor^⌊epoch / decay_every⌋`.
pub fn learning_rate(config: &TrainConfig, epoch: usize) -> f64 {
    config.lr_initial * config.lr_decay_factor.powi((epoch / config.lr_decay_every.max(1)) as i32)
}

/// SplitMix64 finalizer over a running hash; used to derive per-use seeds.
pub fn mix_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x9E37_79B9_7F4A_7C15u64, |acc, &p| {
        let mut z = acc ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    })
}

/// Multipliers applied to each term's gradient. The reported
/// [`LossBreakdown`] always uses the configured α and β.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub sup: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl LossWeights {
    pub fn from_config(config: &TrainConfig) -> Self {
        Self {
            sup: 1.0,
            alpha: config.contrastive.alpha,
            beta: config.contrastive.beta,
        }
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub l_sup: f64,
    pub l_pd: f64,
    pub l_pe: f64,
    pub total: f64,
    pub density_anchors: usize,
    pub edge_anchors: usize,
}

impl LogRow {
    pub const CSV_HEADER: &'static str = "step,epoch,lr,l_sup,l_pd,l_pe,total,density_anchors,edge_anchors";

    pub fn breakdown(&self) -> LossBreakdown {
        LossBreakdown {
            l_sup: self.l_sup,
            l_pd: self.l_pd,
            l_pe: self.l_pe,
            total: self.total,
        }
    }

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{:e},{:.9},{:.9},{:.9},{:.9},{},{}",
            self.step,
            self.epoch,
            self.lr,
            self.l_sup,
            self.l_pd,
            self.l_pe,
            self.total,
            self.density_anchors,
            self.edge_anchors
        )
    }
}

/// Pooled regions of one sample together with what their backward needs.
struct RegionFeatures {
    density: Vec<(PooledFeature, Pooled, Window)>,
    edge: Option<(PooledFeature, Pooled)>,
    background: Option<(PooledFeature, Pooled)>,
    inner: Mask,
    outer: Mask,
}

fn pooled_feature(pooled: &Pooled, tag: FeatureTag, sample: &str, region: Region) -> PooledFeature {
    PooledFeature {
        vector: pooled.vector.clone(),
        tag,
        source: SourceId {
            sample: sample.to_string(),
            region,
        },
    }
}

fn extract_regions(id: &str, features: &FeatureMap, mask: &Mask, grid_n: usize) -> Result<RegionFeatures> {
    let grid = partition(mask, grid_n)?;
    let view = features.view3();
    let mut density = Vec::new();
    for (index, info) in grid.entries.iter().enumerate() {
        if info.foreground == 0 {
            continue;
        }
        let w = info.window;
        let rows = w.top..w.top + w.height;
        let cols = w.left..w.left + w.width;
        let fv = view.slice(s![.., rows.clone(), cols.clone()]);
        let mv = mask.slice(s![rows, cols]);
        if let Some(p) = masked_average_pool(fv, mv)? {
            let f = pooled_feature(&p, info.density_class.into(), id, Region::Patch(index));
            density.push((f, p, w));
        }
    }
    let contours = compose_contours(&grid, mask)?;
    let pool_region = |m: &Mask, tag, region| -> Result<Option<(PooledFeature, Pooled)>> {
        Ok(masked_average_pool(view, m.view())?.map(|p| (pooled_feature(&p, tag, id, region), p)))
    };
    Ok(RegionFeatures {
        edge: pool_region(&contours.inner, FeatureTag::Edge, Region::InnerContour)?,
        background: pool_region(&contours.outer, FeatureTag::Background, Region::OuterContour)?,
        density,
        inner: contours.inner,
        outer: contours.outer,
    })
}

/// Loss values and parameter gradients for one mini-batch, before any
/// optimizer update.
#[derive(Debug, Clone)]
pub struct StepGradients {
    pub breakdown: LossBreakdown,
    pub grads: Gradients,
    /// Detached dense/sparse features of this batch, in batch order.
    pub density_features: Vec<PooledFeature>,
    pub density_anchors: usize,
    pub edge_anchors: usize,
}

/// Forward + backward of the composite loss on `batch`. Does not touch the
/// optimizer or the bank.
pub fn compute_gradients(
    model: &UNet,
    batch: &[Sample],
    bank: &MemoryBank,
    config: &TrainConfig,
    weights: LossWeights,
    step: usize,
) -> Result<StepGradients> {
    if batch.is_empty() {
        return Err(Error::Shape("empty batch".into()));
    }
    let multiple = model.descriptor().size_multiple();
    for s in batch {
        s.validate()?;
        let (h, w) = (s.height(), s.width());
        if h % multiple != 0 || w % multiple != 0 {
            return Err(Error::Shape(format!(
                "sample {} is {h}x{w}; the backbone needs multiples of {multiple}",
                s.id
            )));
        }
    }
    let images: Vec<_> = batch.iter().map(|s| &s.image).collect();
    let caches = model.forward_batch(&images)?;

    let logits: Vec<f32> = caches.iter().flat_map(|c| c.logits().iter().copied()).collect();
    let targets: Vec<u8> = batch.iter().flat_map(|s| s.mask.iter().copied()).collect();
    let (l_sup, grad_logits) = bce_from_logits(&logits, &targets)?;

    let regions: Vec<RegionFeatures> = par::map_range(batch.len(), |i| {
        extract_regions(&batch[i].id, caches[i].features(), &batch[i].mask, config.grid_n)
    })
    .into_iter()
    .collect::<Result<_>>()?;

    let tau = config.contrastive.temperature;
    let density_features: Vec<PooledFeature> =
        regions.iter().flat_map(|r| r.density.iter().map(|(f, _, _)| f.clone())).collect();
    let cap = config.bank_sample_cap;
    let mut candidates = bank.sample(|f| f.tag == FeatureTag::Dense, cap, mix_seed(&[config.seed, step as u64, 1]));
    candidates.extend(bank.sample(|f| f.tag == FeatureTag::Sparse, cap, mix_seed(&[config.seed, step as u64, 2])));
    let pd = density_loss(&density_features, &candidates, tau)?;

    let edges: Vec<(usize, &Pooled)> = regions
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.edge.as_ref().map(|(_, p)| (i, p)))
        .collect();
    let backgrounds: Vec<(usize, &Pooled)> = regions
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.background.as_ref().map(|(_, p)| (i, p)))
        .collect();
    let edge_vecs: Vec<&[f64]> = edges.iter().map(|(_, p)| p.vector.as_slice()).collect();
    let bg_vecs: Vec<&[f64]> = backgrounds.iter().map(|(_, p)| p.vector.as_slice()).collect();
    let pe = edge_loss(&edge_vecs, &bg_vecs, tau)?;

    let breakdown = total_loss(l_sup, pd.value, pe.value, &config.contrastive)?;

    // route contrastive gradients back to each sample's feature map
    let contrastive_active = (weights.alpha != 0.0 && pd.anchors > 0) || (weights.beta != 0.0 && pe.anchors > 0);
    let mut feature_grads: Vec<Option<FeatureMap>> = (0..batch.len()).map(|_| None).collect();
    if contrastive_active {
        let mut offset = 0;
        for (i, r) in regions.iter().enumerate() {
            let f = caches[i].features();
            let mut g = FeatureMap::zeros(f.channels, f.height, f.width);
            if weights.alpha != 0.0 {
                let mut gv = g.view3_mut();
                for (k, (_, pooled, w)) in r.density.iter().enumerate() {
                    let grad: Vec<f64> = pd.grads[offset + k].iter().map(|x| x * weights.alpha).collect();
                    let rows = w.top..w.top + w.height;
                    let cols = w.left..w.left + w.width;
                    masked_average_pool_backward(
                        pooled,
                        &grad,
                        batch[i].mask.slice(s![rows.clone(), cols.clone()]),
                        gv.slice_mut(s![.., rows, cols]),
                    );
                }
            }
            offset += r.density.len();
            feature_grads[i] = Some(g);
        }
        if weights.beta != 0.0 {
            let edge_part = edges.iter().map(|&(i, p)| (i, p, &regions[i].inner));
            let bg_part = backgrounds.iter().map(|&(i, p)| (i, p, &regions[i].outer));
            for ((i, pooled, mask), grad) in edge_part.chain(bg_part).zip(&pe.grads) {
                let grad: Vec<f64> = grad.iter().map(|x| x * weights.beta).collect();
                let g = feature_grads[i].as_mut().expect("allocated above");
                masked_average_pool_backward(pooled, &grad, mask.view(), g.view3_mut());
            }
        }
    }

    let pixels: Vec<usize> = batch.iter().map(|s| s.height() * s.width()).collect();
    let mut starts = vec![0usize; batch.len()];
    for i in 1..batch.len() {
        starts[i] = starts[i - 1] + pixels[i - 1];
    }
    let per_sample = par::map_range(batch.len(), |i| {
        let gl: Vec<f32> = grad_logits[starts[i]..starts[i] + pixels[i]]
            .iter()
            .map(|g| (*g as f64 * weights.sup) as f32)
            .collect();
        model.backward(&caches[i], &gl, feature_grads[i].as_ref())
    });
    let mut grads = Gradients::zeros_like(model.params());
    for g in &per_sample {
        grads.add_assign(g);
    }
    let max = grads.max_abs();
    if !max.is_finite() {
        return Err(Error::NonFinite {
            component: "gradient",
            value: max as f64,
        });
    }
    Ok(StepGradients {
        breakdown,
        grads,
        density_features,
        density_anchors: pd.anchors,
        edge_anchors: pe.anchors,
    })
}

/// Receives log rows and checkpoints as training progresses.
pub trait TrainObserver {
    fn on_step(&mut self, _row: &LogRow) -> Result<()> {
        Ok(())
    }

    /// Called at every decay boundary and once more at the end.
    fn on_checkpoint(&mut self, _checkpoint: &Checkpoint, _is_final: bool) -> Result<()> {
        Ok(())
    }
}

pub struct NoopObserver;

impl TrainObserver for NoopObserver {}

/// Writes `train_log.jsonl`, `train_log.csv` and `checkpoints/*.lsck`
/// under one directory. Existing logs are appended to.
pub struct RunDirectory {
    dir: PathBuf,
    jsonl: BufWriter<File>,
    csv: BufWriter<File>,
}

impl RunDirectory {
    pub fn open(dir: &Path) -> Result<Self> {
        let ckdir = dir.join("checkpoints");
        std::fs::create_dir_all(&ckdir).map_err(|e| Error::io(&ckdir, e))?;
        let open = |name: &str| -> Result<(BufWriter<File>, bool)> {
            let path = dir.join(name);
            let fresh = !path.exists();
            let f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            Ok((BufWriter::new(f), fresh))
        };
        let (jsonl, _) = open("train_log.jsonl")?;
        let (mut csv, fresh) = open("train_log.csv")?;
        if fresh {
            writeln!(csv, "{}", LogRow::CSV_HEADER).map_err(|e| Error::io(dir.join("train_log.csv"), e))?;
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            jsonl,
            csv,
        })
    }

    pub fn checkpoint_path(&self, epoch: usize, is_final: bool) -> PathBuf {
        let name = if is_final {
            "final.lsck".to_string()
        } else {
            format!("epoch_{epoch:04}.lsck")
        };
        self.dir.join("checkpoints").join(name)
    }
}

impl TrainObserver for RunDirectory {
    fn on_step(&mut self, row: &LogRow) -> Result<()> {
        let line = serde_json::to_string(row).expect("log rows serialize");
        let err = |e| Error::io(&self.dir, e);
        writeln!(self.jsonl, "{line}").map_err(err)?;
        writeln!(self.csv, "{}", row.to_csv()).map_err(err)?;
        Ok(())
    }

    fn on_checkpoint(&mut self, checkpoint: &Checkpoint, is_final: bool) -> Result<()> {
        let err = |e| Error::io(&self.dir, e);
        self.jsonl.flush().map_err(err)?;
        self.csv.flush().map_err(err)?;
        checkpoint.save(&self.checkpoint_path(checkpoint.epoch, is_final))
    }
}

/// Model, optimizer and bank plus the position in the schedule.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: UNet,
    pub optimizer: Adam,
    pub bank: MemoryBank,
    /// Next epoch to run.
    pub epoch: usize,
    /// Optimizer steps taken.
    pub step: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = UNet::new(config.backbone.clone(), config.seed)?;
        let optimizer = Adam::new(config.adam, model.params());
        let bank = MemoryBank::new(config.bank_capacity);
        Ok(Self {
            config,
            model,
            optimizer,
            bank,
            epoch: 0,
            step: 0,
        })
    }

    pub fn from_checkpoint(checkpoint: Checkpoint) -> Self {
        Self {
            config: checkpoint.config,
            model: checkpoint.model,
            optimizer: checkpoint.optimizer,
            bank: checkpoint.bank,
            epoch: checkpoint.epoch,
            step: checkpoint.step,
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            model: self.model.clone(),
            optimizer: self.optimizer.clone(),
            bank: self.bank.clone(),
            epoch: self.epoch,
            step: self.step,
        }
    }

    pub fn learning_rate(&self) -> f64 {
        learning_rate(&self.config, self.epoch)
    }

    /// One optimizer step on `batch` at the current epoch's learning rate,
    /// then pushes the batch's density features into the bank.
    pub fn train_step(&mut self, batch: &[Sample]) -> Result<LogRow> {
        let step = self.step;
        let wrap = |e| Error::Step {
            step,
            source: Box::new(e),
        };
        let out = compute_gradients(
            &self.model,
            batch,
            &self.bank,
            &self.config,
            LossWeights::from_config(&self.config),
            step,
        )
        .map_err(wrap)?;
        let lr = self.learning_rate();
        self.optimizer.update(self.model.params_mut(), &out.grads, lr as f32);
        self.bank.push(out.density_features).map_err(wrap)?;
        self.step += 1;
        let b = out.breakdown;
        Ok(LogRow {
            step,
            epoch: self.epoch,
            lr,
            l_sup: b.l_sup,
            l_pd: b.l_pd,
            l_pe: b.l_pe,
            total: b.total,
            density_anchors: out.density_anchors,
            edge_anchors: out.edge_anchors,
        })
    }

    /// Sample order for `epoch`: a permutation seeded by `(seed, epoch)`.
    pub fn epoch_order(&self, len: usize, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..len).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[self.config.seed, 0x5348_5546, epoch as u64]));
        order.shuffle(&mut rng);
        order
    }

    /// Runs the remaining epochs over `dataset`.
    pub fn fit(&mut self, dataset: &[Sample], observer: &mut dyn TrainObserver) -> Result<Vec<LogRow>> {
        if dataset.is_empty() {
            return Err(Error::Shape("empty training set".into()));
        }
        let mut log = Vec::new();
        while self.epoch < self.config.epochs {
            let epoch = self.epoch;
            let order = self.epoch_order(dataset.len(), epoch);
            for chunk in order.chunks(self.config.batch_size) {
                let batch: Vec<Sample> = match &self.config.augmentation {
                    Some(aug) => par::map_slice(chunk, |&i| {
                        augment(&dataset[i], aug, mix_seed(&[self.config.seed, epoch as u64, i as u64]))
                    }),
                    None => chunk.iter().map(|&i| dataset[i].clone()).collect(),
                };
                let row = self.train_step(&batch)?;
                log::debug!(
                    "epoch {} step {} lr {:e} total {:.5} (sup {:.5} pd {:.5} pe {:.5})",
                    row.epoch,
                    row.step,
                    row.lr,
                    row.total,
                    row.l_sup,
                    row.l_pd,
                    row.l_pe
                );
                observer.on_step(&row)?;
                log.push(row);
            }
            self.epoch += 1;
            let done = self.epoch == self.config.epochs;
            if done || self.epoch.is_multiple_of(self.config.lr_decay_every) {
                observer.on_checkpoint(&self.checkpoint(), done)?;
            }
        }
        Ok(log)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::make_synthetic_dataset;
    use crate::nn::BackboneDescriptor;

    fn small_config() -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            epochs: 1,
            input_size: 32,
            grid_n: 4,
            backbone: BackboneDescriptor {
                in_channels: 3,
                widths: vec![4, 8],
            },
            augmentation: None,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn schedule_steps_at_boundaries() {
        let c = TrainConfig::default();
        let lr = |e| learning_rate(&c, e);
        assert_eq!(lr(0), 1e-3);
        assert_eq!(lr(79), 1e-3);
        assert!((lr(80) - 1e-4).abs() < 1e-18);
        assert!((lr(159) - 1e-4).abs() < 1e-18);
        assert!((lr(160) - 1e-5).abs() < 1e-18);
        assert!((lr(239) - 1e-5).abs() < 1e-18);
    }

    #[test]
    fn seeds_mix_distinctly() {
        assert_ne!(mix_seed(&[1, 2]), mix_seed(&[2, 1]));
        assert_ne!(mix_seed(&[0]), mix_seed(&[0, 0]));
        assert_eq!(mix_seed(&[7, 8]), mix_seed(&[7, 8]));
    }

    #[test]
    fn step_is_deterministic_and_fills_bank() {
        let data = make_synthetic_dataset(2, 64, 3).unwrap();
        let batch: Vec<_> = data.iter().map(|s| crate::dataset::resize_crop(s, 32, crate::dataset::CropMode::Center)).collect();
        let mut a = Trainer::new(small_config()).unwrap();
        let mut b = Trainer::new(small_config()).unwrap();
        let ra = a.train_step(&batch).unwrap();
        let rb = b.train_step(&batch).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a.model, b.model);
        assert_eq!(a.step, 1);
        assert!(ra.total.is_finite());
        let expected = ra.l_sup + 0.02 * ra.l_pd + 0.1 * ra.l_pe;
        assert_eq!(ra.total, expected);
        assert!(!a.bank.is_empty());
        assert!(a.bank.iter().all(|f| matches!(f.tag, FeatureTag::Dense | FeatureTag::Sparse)));
    }

    #[test]
    fn empty_inputs_are_rejected() {
        let mut t = Trainer::new(small_config()).unwrap();
        assert!(matches!(t.train_step(&[]), Err(Error::Step { step: 0, .. })));
        assert!(t.fit(&[], &mut NoopObserver).is_err());
    }

    #[test]
    fn epoch_order_is_a_seeded_permutation() {
        let t = Trainer::new(small_config()).unwrap();
        let a = t.epoch_order(10, 0);
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
        assert_eq!(a, t.epoch_order(10, 0));
        assert_ne!(a, t.epoch_order(10, 1));
    }
}
