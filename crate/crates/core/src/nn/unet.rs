use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ops::{self, FeatureMap};
use crate::{par, Error, Result};

/// Channel widths per resolution level, top (full resolution) first.
/// `widths[0]` is the penultimate feature width.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneDescriptor {
    pub in_channels: usize,
    pub widths: Vec<usize>,
}

impl Default for BackboneDescriptor {
    fn default() -> Self {
        Self {
            in_channels: 3,
            widths: vec![16, 32, 64, 128],
        }
    }
}

impl BackboneDescriptor {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.in_channels == 0 {
            problems.push("in_channels must be positive".to_string());
        }
        if self.widths.is_empty() || self.widths.len() > 8 {
            problems.push(format!("need 1..=8 levels, got {}", self.widths.len()));
        }
        if self.widths.contains(&0) {
            problems.push("channel widths must be positive".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidDescriptor(problems.join("; ")))
        }
    }

    pub fn depth(&self) -> usize {
        self.widths.len()
    }

    pub fn feature_channels(&self) -> usize {
        self.widths[0]
    }

    /// Input height and width must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.depth() - 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
}

/// Per-parameter gradients, aligned with [`UNet::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Vec<f32>>);

impl Gradients {
    pub fn zeros_like(params: &[Param]) -> Self {
        Gradients(params.iter().map(|p| vec![0.0; p.value.len()]).collect())
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn max_abs(&self) -> f32 {
        self.0.iter().flatten().fold(0.0, |m, v| m.max(v.abs()))
    }
}

struct EncoderCache {
    /// Input to the first conv (image or pooled map from the level above).
    input: FeatureMap,
    mid: FeatureMap,
    out: FeatureMap,
    /// Argmax of the pooling that feeds the next level.
    pool_arg: Option<Vec<u8>>,
}

struct DecoderCache {
    below: FeatureMap,
    concat: FeatureMap,
    mid: FeatureMap,
    out: FeatureMap,
}

/// Everything the backward pass needs from one sample's forward pass.
pub struct ForwardCache {
    encoders: Vec<EncoderCache>,
    /// Indexed by level; the deepest level has no decoder.
    decoders: Vec<Option<DecoderCache>>,
    logits: Vec<f32>,
}

impl ForwardCache {
    /// Penultimate `C×H×W` feature map.
    pub fn features(&self) -> &FeatureMap {
        match self.decoders.first() {
            Some(Some(d)) => &d.out,
            _ => &self.encoders[0].out,
        }
    }

    /// Pre-sigmoid logits, row-major `H·W`.
    pub fn logits(&self) -> &[f32] {
        &self.logits
    }
}

/// Encoder-decoder with skip connections: two 3×3 conv+ReLU per level,
/// 2×2 max pooling down, 2×2 transposed convolution up, 1×1 head.
#[derive(Debug, Clone, PartialEq)]
pub struct UNet {
    descriptor: BackboneDescriptor,
    params: Vec<Param>,
}

fn he_normal(rng: &mut ChaCha8Rng, n: usize, fan_in: usize) -> Vec<f32> {
    let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
    (0..n).map(|_| dist.sample(rng) as f32).collect()
}

impl UNet {
    /// Builds the network with He-normal weights drawn from `seed`.
    pub fn new(descriptor: BackboneDescriptor, seed: u64) -> Result<Self> {
        descriptor.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths = &descriptor.widths;
        let depth = widths.len();
        let mut params = Vec::new();
        let conv = |params: &mut Vec<Param>, rng: &mut ChaCha8Rng, name: String, cin: usize, cout: usize| {
            params.push(Param {
                name: format!("{name}.weight"),
                shape: vec![cout, cin, 3, 3],
                value: he_normal(rng, cout * cin * 9, cin * 9),
            });
            params.push(Param {
                name: format!("{name}.bias"),
                shape: vec![cout],
                value: vec![0.0; cout],
            });
        };
        for l in 0..depth {
            let cin = if l == 0 { descriptor.in_channels } else { widths[l - 1] };
            conv(&mut params, &mut rng, format!("enc{l}.conv1"), cin, widths[l]);
            conv(&mut params, &mut rng, format!("enc{l}.conv2"), widths[l], widths[l]);
        }
        for l in (0..depth.saturating_sub(1)).rev() {
            let (cin, cout) = (widths[l + 1], widths[l]);
            params.push(Param {
                name: format!("dec{l}.up.weight"),
                shape: vec![cin, cout, 2, 2],
                value: he_normal(&mut rng, cin * cout * 4, cin),
            });
            params.push(Param {
                name: format!("dec{l}.up.bias"),
                shape: vec![cout],
                value: vec![0.0; cout],
            });
            conv(&mut params, &mut rng, format!("dec{l}.conv1"), 2 * cout, cout);
            conv(&mut params, &mut rng, format!("dec{l}.conv2"), cout, cout);
        }
        params.push(Param {
            name: "head.weight".into(),
            shape: vec![1, widths[0], 1, 1],
            value: he_normal(&mut rng, widths[0], widths[0] * 2),
        });
        params.push(Param {
            name: "head.bias".into(),
            shape: vec![1],
            value: vec![0.0],
        });
        Ok(Self { descriptor, params })
    }

    /// Rebuilds a network from stored parameters, checking names and shapes.
    pub fn from_params(descriptor: BackboneDescriptor, params: Vec<Param>) -> Result<Self> {
        let template = Self::new(descriptor.clone(), 0)?;
        if template.params.len() != params.len()
            || template
                .params
                .iter()
                .zip(&params)
                .any(|(a, b)| a.name != b.name || a.shape != b.shape || a.value.len() != b.value.len())
        {
            return Err(Error::Checkpoint(
                "parameters do not match the backbone descriptor".into(),
            ));
        }
        Ok(Self { descriptor, params })
    }

    pub fn descriptor(&self) -> &BackboneDescriptor {
        &self.descriptor
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    fn depth(&self) -> usize {
        self.descriptor.depth()
    }

    fn enc_index(&self, level: usize, conv: usize) -> usize {
        4 * level + 2 * conv
    }

    /// Index of `dec{level}.up.weight`; conv1/conv2 follow at +2 and +4.
    fn dec_index(&self, level: usize) -> usize {
        let depth = self.depth();
        4 * depth + 6 * (depth - 2 - level)
    }

    fn head_index(&self) -> usize {
        4 * self.depth() + 6 * (self.depth() - 1)
    }

    fn check_input(&self, image: &Array3<f32>) -> Result<()> {
        let (c, h, w) = image.dim();
        let m = self.descriptor.size_multiple();
        if c != self.descriptor.in_channels || h % m != 0 || w % m != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "network expects {} channels with sides divisible by {m}, got {c}x{h}x{w}",
                self.descriptor.in_channels
            )));
        }
        Ok(())
    }

    fn conv(&self, idx: usize, input: &FeatureMap) -> FeatureMap {
        let cout = self.params[idx].shape[0];
        let mut out = ops::conv3x3(input, &self.params[idx].value, &self.params[idx + 1].value, cout);
        ops::relu_inplace(&mut out);
        out
    }

    /// Forward pass for one `C×H×W` image.
    pub fn forward(&self, image: &Array3<f32>) -> Result<ForwardCache> {
        self.check_input(image)?;
        let (c, h, w) = image.dim();
        let depth = self.depth();
        let mut x = FeatureMap::from_vec(c, h, w, image.as_standard_layout().iter().copied().collect());
        let mut encoders: Vec<EncoderCache> = Vec::with_capacity(depth);
        for l in 0..depth {
            let mid = self.conv(self.enc_index(l, 0), &x);
            let out = self.conv(self.enc_index(l, 1), &mid);
            let (next, pool_arg) = if l + 1 < depth {
                let (p, a) = ops::maxpool2(&out);
                (Some(p), Some(a))
            } else {
                (None, None)
            };
            encoders.push(EncoderCache {
                input: x,
                mid,
                out,
                pool_arg,
            });
            match next {
                Some(n) => x = n,
                None => break,
            }
        }
        let mut decoders: Vec<Option<DecoderCache>> = (0..depth).map(|_| None).collect();
        let mut below = encoders[depth - 1].out.clone();
        for l in (0..depth - 1).rev() {
            let idx = self.dec_index(l);
            let cout = self.params[idx].shape[1];
            let up = ops::conv_transpose2(&below, &self.params[idx].value, &self.params[idx + 1].value, cout);
            let concat = up.concat(&encoders[l].out);
            let mid = self.conv(idx + 2, &concat);
            let out = self.conv(idx + 4, &mid);
            let next = out.clone();
            decoders[l] = Some(DecoderCache {
                below,
                concat,
                mid,
                out,
            });
            below = next;
        }
        let mut cache = ForwardCache {
            encoders,
            decoders,
            logits: Vec::new(),
        };
        let head = self.head_index();
        cache.logits = ops::conv1x1_single(cache.features(), &self.params[head].value, self.params[head + 1].value[0]);
        Ok(cache)
    }

    /// Features and logits without keeping the backward cache around longer
    /// than needed.
    pub fn predict(&self, image: &Array3<f32>) -> Result<(FeatureMap, Vec<f32>)> {
        let mut cache = self.forward(image)?;
        let logits = std::mem::take(&mut cache.logits);
        let features = match cache.decoders.first_mut() {
            Some(Some(d)) => std::mem::replace(&mut d.out, FeatureMap::zeros(0, 0, 0)),
            _ => std::mem::replace(&mut cache.encoders[0].out, FeatureMap::zeros(0, 0, 0)),
        };
        Ok((features, logits))
    }

    /// Forward passes over a batch; samples are independent.
    pub fn forward_batch(&self, images: &[&Array3<f32>]) -> Result<Vec<ForwardCache>> {
        par::map_slice(images, |img| self.forward(img)).into_iter().collect()
    }

    fn conv_backward(
        &self,
        idx: usize,
        input: &FeatureMap,
        output: &FeatureMap,
        mut grad: FeatureMap,
        grads: &mut Gradients,
        need_input: bool,
    ) -> Option<FeatureMap> {
        ops::relu_backward_inplace(&mut grad, output);
        let (gw, rest) = grads.0[idx..].split_at_mut(1);
        ops::conv3x3_backward(input, &self.params[idx].value, &grad, &mut gw[0], &mut rest[0], need_input)
    }

    /// Parameter gradients for one sample given `∂L/∂logits` and an optional
    /// extra `∂L/∂features` on the penultimate map.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_logits: &[f32],
        grad_features: Option<&FeatureMap>,
    ) -> Gradients {
        let depth = self.depth();
        let mut grads = Gradients::zeros_like(&self.params);
        let head = self.head_index();
        let mut g = {
            let (gw, rest) = grads.0[head..].split_at_mut(1);
            ops::conv1x1_single_backward(cache.features(), &self.params[head].value, grad_logits, &mut gw[0], &mut rest[0][0])
        };
        if let Some(extra) = grad_features {
            g.add_assign(extra);
        }
        let mut skip_grads: Vec<Option<FeatureMap>> = (0..depth).map(|_| None).collect();
        for l in 0..depth - 1 {
            let d = cache.decoders[l].as_ref().expect("decoder cache");
            let idx = self.dec_index(l);
            let g_mid = self
                .conv_backward(idx + 4, &d.mid, &d.out, g, &mut grads, true)
                .expect("input grad");
            let g_cat = self
                .conv_backward(idx + 2, &d.concat, &d.mid, g_mid, &mut grads, true)
                .expect("input grad");
            let cout = self.params[idx].shape[1];
            let (g_up, g_skip) = g_cat.split_channels(cout);
            skip_grads[l] = Some(g_skip);
            let (gw, rest) = grads.0[idx..].split_at_mut(1);
            g = ops::conv_transpose2_backward(&d.below, &self.params[idx].value, &g_up, &mut gw[0], &mut rest[0]);
        }
        // g is now the gradient w.r.t. the deepest encoder output
        for l in (0..depth).rev() {
            let e = &cache.encoders[l];
            if let Some(s) = skip_grads[l].take() {
                g.add_assign(&s);
            }
            let g_mid = self
                .conv_backward(self.enc_index(l, 1), &e.mid, &e.out, g, &mut grads, true)
                .expect("input grad");
            let g_in = self.conv_backward(self.enc_index(l, 0), &e.input, &e.mid, g_mid, &mut grads, l > 0);
            if l > 0 {
                let above = &cache.encoders[l - 1];
                let arg = above.pool_arg.as_ref().expect("pool argmax");
                g = ops::maxpool2_backward(&g_in.expect("input grad"), arg, above.out.height, above.out.width);
            } else {
                break;
            }
        }
        grads
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny() -> BackboneDescriptor {
        BackboneDescriptor {
            in_channels: 3,
            widths: vec![4, 6, 8],
        }
    }

    fn image(seed: u64, size: usize) -> Array3<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((3, size, size), |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn shape_contract() {
        let net = UNet::new(BackboneDescriptor::default(), 0).unwrap();
        let cache = net.forward(&image(1, 64)).unwrap();
        let f = cache.features();
        assert_eq!((f.channels, f.height, f.width), (16, 64, 64));
        assert_eq!(cache.logits().len(), 64 * 64);
        assert!(net.forward(&image(1, 60)).is_err());
    }

    #[test]
    fn init_is_deterministic() {
        let a = UNet::new(tiny(), 9).unwrap();
        let b = UNet::new(tiny(), 9).unwrap();
        let c = UNet::new(tiny(), 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_descriptors() {
        for d in [
            BackboneDescriptor { in_channels: 3, widths: vec![] },
            BackboneDescriptor { in_channels: 0, widths: vec![4] },
            BackboneDescriptor { in_channels: 3, widths: vec![4, 0] },
        ] {
            assert!(matches!(UNet::new(d, 0), Err(Error::InvalidDescriptor(_))));
        }
    }

    #[test]
    fn param_layout_names() {
        let net = UNet::new(tiny(), 0).unwrap();
        let names: Vec<_> = net.params().iter().map(|p| p.name.as_str()).collect();
        assert_eq!(names[net.dec_index(1)], "dec1.up.weight");
        assert_eq!(names[net.dec_index(0) + 4], "dec0.conv2.weight");
        assert_eq!(names[net.head_index()], "head.weight");
        assert_eq!(names.len(), net.head_index() + 2);
    }

    /// Full-network finite-difference check of `Σ probe·logits + Σ q·features`.
    fn check_network_gradient(desc: BackboneDescriptor) {
        let mut net = UNet::new(desc, 3).unwrap();
        // positive biases keep ReLUs away from their kink for the probe
        for p in net.params_mut() {
            if p.name.ends_with("bias") {
                p.value.iter_mut().for_each(|v| *v = 0.05);
            }
        }
        let img = image(4, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let probe: Vec<f32> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let c = net.descriptor().feature_channels();
        let q = FeatureMap::from_vec(c, 8, 8, (0..c * 64).map(|_| rng.random_range(-0.5..0.5)).collect());
        let objective = |n: &UNet| -> f64 {
            let cache = n.forward(&img).unwrap();
            let a: f64 = cache.logits().iter().zip(&probe).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
            let b: f64 = cache.features().data.iter().zip(&q.data).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
            a + b
        };
        let cache = net.forward(&img).unwrap();
        let grads = net.backward(&cache, &probe, Some(&q));
        let h = 1e-3f32;
        let mut checked = 0;
        for (pi, p) in net.params().iter().enumerate() {
            for i in (0..p.value.len()).step_by(p.value.len() / 3 + 1) {
                let fd_at = |h: f32| {
                    let mut plus = net.clone();
                    plus.params_mut()[pi].value[i] += h;
                    let mut minus = net.clone();
                    minus.params_mut()[pi].value[i] -= h;
                    (objective(&plus) - objective(&minus)) / (2.0 * h as f64)
                };
                let (fd, fd_small) = (fd_at(h), fd_at(h / 4.0));
                let an = grads.0[pi][i] as f64;
                let tol = 2e-2 * fd.abs().max(an.abs()).max(1.0);
                if (fd - fd_small).abs() > tol {
                    // a ReLU or pooling switch inside the step
                    continue;
                }
                assert!((fd - an).abs() < tol, "{}[{i}]: fd {fd} vs analytic {an}", p.name);
                checked += 1;
            }
        }
        assert!(checked >= net.params().len());
    }

    #[test]
    fn backward_matches_finite_differences() {
        check_network_gradient(tiny());
    }

    #[test]
    fn single_level_backward() {
        check_network_gradient(BackboneDescriptor { in_channels: 3, widths: vec![3] });
    }

    #[test]
    fn batch_composition_does_not_leak() {
        let net = UNet::new(tiny(), 1).unwrap();
        let (a, b) = (image(1, 16), image(2, 16));
        let solo = net.forward_batch(&[&a]).unwrap();
        let pair = net.forward_batch(&[&b, &a]).unwrap();
        assert_eq!(solo[0].logits(), pair[1].logits());
        assert_eq!(solo[0].features(), pair[1].features());
    }
}
