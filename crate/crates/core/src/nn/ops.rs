//! Forward and backward kernels on `C×H×W` feature maps.
//!
//! Convolutions go through im2col and a single GEMM; the column buffer is
//! rebuilt in the backward pass instead of being cached.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

/// Dense `C×H×W` activations, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), channels * height * width, "feature map size");
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn matrix(&self) -> ArrayView2<'_, f32> {
        ArrayView2::from_shape((self.channels, self.plane_len()), &self.data).expect("contiguous")
    }

    pub fn matrix_mut(&mut self) -> ArrayViewMut2<'_, f32> {
        let shape = (self.channels, self.plane_len());
        ArrayViewMut2::from_shape(shape, &mut self.data).expect("contiguous")
    }

    pub fn view3(&self) -> ndarray::ArrayView3<'_, f32> {
        ndarray::ArrayView3::from_shape((self.channels, self.height, self.width), &self.data)
            .expect("contiguous")
    }

    pub fn view3_mut(&mut self) -> ndarray::ArrayViewMut3<'_, f32> {
        let shape = (self.channels, self.height, self.width);
        ndarray::ArrayViewMut3::from_shape(shape, &mut self.data).expect("contiguous")
    }

    /// Channel-wise concatenation `[self; other]`.
    pub fn concat(&self, other: &FeatureMap) -> FeatureMap {
        debug_assert_eq!((self.height, self.width), (other.height, other.width));
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        FeatureMap::from_vec(self.channels + other.channels, self.height, self.width, data)
    }

    /// Inverse of [`concat`](Self::concat) for gradients.
    pub fn split_channels(self, first: usize) -> (FeatureMap, FeatureMap) {
        let at = first * self.plane_len();
        let (h, w) = (self.height, self.width);
        let mut data = self.data;
        let tail = data.split_off(at);
        (
            FeatureMap::from_vec(first, h, w, data),
            FeatureMap::from_vec(tail.len() / (h * w), h, w, tail),
        )
    }

    pub fn add_assign(&mut self, other: &FeatureMap) {
        debug_assert_eq!(self.data.len(), other.data.len());
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a += b);
    }
}

fn gemm(a: ArrayView2<f32>, b: ArrayView2<f32>, beta: f32, c: &mut ArrayViewMut2<f32>) {
    general_mat_mul(1.0, &a, &b, beta, c);
}

/// `(C·9) × (H·W)` column matrix for a 3×3, pad-1, stride-1 convolution.
fn im2col3(input: &FeatureMap) -> Vec<f32> {
    let (h, w) = (input.height, input.width);
    let hw = h * w;
    let mut cols = vec![0.0f32; input.channels * 9 * hw];
    for c in 0..input.channels {
        let plane = &input.data[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((c * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * w..][..w];
                    let dst = &mut row[y * w..][..w];
                    match kx {
                        0 => dst[1..].copy_from_slice(&src[..w - 1]),
                        1 => dst.copy_from_slice(src),
                        _ => dst[..w - 1].copy_from_slice(&src[1..]),
                    }
                }
            }
        }
    }
    cols
}

fn col2im3(cols: &[f32], out: &mut FeatureMap) {
    let (h, w) = (out.height, out.width);
    let hw = h * w;
    for c in 0..out.channels {
        let plane = &mut out.data[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((c * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..][..w];
                    let src = &row[y * w..][..w];
                    match kx {
                        0 => dst[..w - 1]
                            .iter_mut()
                            .zip(&src[1..])
                            .for_each(|(d, s)| *d += s),
                        1 => dst.iter_mut().zip(src).for_each(|(d, s)| *d += s),
                        _ => dst[1..]
                            .iter_mut()
                            .zip(&src[..w - 1])
                            .for_each(|(d, s)| *d += s),
                    }
                }
            }
        }
    }
}

/// 3×3 convolution, zero padding 1. `weight` is `cout × (cin·9)`.
pub fn conv3x3(input: &FeatureMap, weight: &[f32], bias: &[f32], cout: usize) -> FeatureMap {
    let hw = input.plane_len();
    let k = input.channels * 9;
    let cols = im2col3(input);
    let mut out = FeatureMap::zeros(cout, input.height, input.width);
    {
        let wm = ArrayView2::from_shape((cout, k), weight).expect("weight shape");
        let cm = ArrayView2::from_shape((k, hw), &cols).expect("cols shape");
        gemm(wm, cm, 0.0, &mut out.matrix_mut());
    }
    for (o, b) in out.data.chunks_mut(hw).zip(bias) {
        o.iter_mut().for_each(|v| *v += b);
    }
    out
}

/// Gradients of [`conv3x3`]. Accumulates into `grad_weight`/`grad_bias`;
/// returns the input gradient when `need_input` is set.
pub fn conv3x3_backward(
    input: &FeatureMap,
    weight: &[f32],
    grad_out: &FeatureMap,
    grad_weight: &mut [f32],
    grad_bias: &mut [f32],
    need_input: bool,
) -> Option<FeatureMap> {
    let hw = input.plane_len();
    let k = input.channels * 9;
    let cout = grad_out.channels;
    let cols = im2col3(input);
    let gy = grad_out.matrix();
    {
        let cm = ArrayView2::from_shape((k, hw), &cols).expect("cols shape");
        let mut gw = ArrayViewMut2::from_shape((cout, k), grad_weight).expect("grad shape");
        gemm(gy, cm.t(), 1.0, &mut gw);
    }
    for (g, row) in grad_bias.iter_mut().zip(grad_out.data.chunks(hw)) {
        *g += row.iter().sum::<f32>();
    }
    if !need_input {
        return None;
    }
    let mut gcols = vec![0.0f32; k * hw];
    {
        let wm = ArrayView2::from_shape((cout, k), weight).expect("weight shape");
        let mut gc = ArrayViewMut2::from_shape((k, hw), &mut gcols).expect("cols shape");
        gemm(wm.t(), gy, 0.0, &mut gc);
    }
    let mut grad_in = FeatureMap::zeros(input.channels, input.height, input.width);
    col2im3(&gcols, &mut grad_in);
    Some(grad_in)
}

pub fn relu_inplace(x: &mut FeatureMap) {
    x.data.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Zeroes gradient entries where the ReLU output was not positive.
pub fn relu_backward_inplace(grad: &mut FeatureMap, output: &FeatureMap) {
    grad.data
        .iter_mut()
        .zip(&output.data)
        .for_each(|(g, &o)| {
            if o <= 0.0 {
                *g = 0.0
            }
        });
}

/// 2×2 max pooling, stride 2. Returns the pooled map and the winning
/// position (0..4) inside each window.
pub fn maxpool2(input: &FeatureMap) -> (FeatureMap, Vec<u8>) {
    let (h, w) = (input.height / 2, input.width / 2);
    let mut out = FeatureMap::zeros(input.channels, h, w);
    let mut arg = vec![0u8; out.data.len()];
    let iw = input.width;
    for c in 0..input.channels {
        let src = &input.data[c * input.plane_len()..][..input.plane_len()];
        for y in 0..h {
            for x in 0..w {
                let base = 2 * y * iw + 2 * x;
                let cand = [src[base], src[base + 1], src[base + iw], src[base + iw + 1]];
                let mut best = 0;
                for i in 1..4 {
                    if cand[i] > cand[best] {
                        best = i;
                    }
                }
                let o = c * h * w + y * w + x;
                out.data[o] = cand[best];
                arg[o] = best as u8;
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward(grad_out: &FeatureMap, arg: &[u8], height: usize, width: usize) -> FeatureMap {
    let mut grad_in = FeatureMap::zeros(grad_out.channels, height, width);
    let (h, w) = (grad_out.height, grad_out.width);
    for c in 0..grad_out.channels {
        for y in 0..h {
            for x in 0..w {
                let o = c * h * w + y * w + x;
                let a = arg[o] as usize;
                let (dy, dx) = (a / 2, a % 2);
                grad_in.data[c * height * width + (2 * y + dy) * width + 2 * x + dx] += grad_out.data[o];
            }
        }
    }
    grad_in
}

/// 2×2 stride-2 transposed convolution. `weight` is `cin × (cout·4)` with
/// column index `co·4 + dy·2 + dx`.
pub fn conv_transpose2(input: &FeatureMap, weight: &[f32], bias: &[f32], cout: usize) -> FeatureMap {
    let hw = input.plane_len();
    let mut y4 = vec![0.0f32; cout * 4 * hw];
    {
        let wm = ArrayView2::from_shape((input.channels, cout * 4), weight).expect("weight shape");
        let mut ym = ArrayViewMut2::from_shape((cout * 4, hw), &mut y4).expect("shape");
        gemm(wm.t(), input.matrix(), 0.0, &mut ym);
    }
    let (h, w) = (input.height, input.width);
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = FeatureMap::zeros(cout, oh, ow);
    for co in 0..cout {
        for d in 0..4 {
            let (dy, dx) = (d / 2, d % 2);
            let row = &y4[(co * 4 + d) * hw..][..hw];
            for y in 0..h {
                for x in 0..w {
                    out.data[co * oh * ow + (2 * y + dy) * ow + 2 * x + dx] = row[y * w + x] + bias[co];
                }
            }
        }
    }
    out
}

pub fn conv_transpose2_backward(
    input: &FeatureMap,
    weight: &[f32],
    grad_out: &FeatureMap,
    grad_weight: &mut [f32],
    grad_bias: &mut [f32],
) -> FeatureMap {
    let (h, w) = (input.height, input.width);
    let hw = h * w;
    let cout = grad_out.channels;
    let (oh, ow) = (grad_out.height, grad_out.width);
    let mut g4 = vec![0.0f32; cout * 4 * hw];
    for co in 0..cout {
        let plane = &grad_out.data[co * oh * ow..][..oh * ow];
        grad_bias[co] += plane.iter().sum::<f32>();
        for d in 0..4 {
            let (dy, dx) = (d / 2, d % 2);
            let row = &mut g4[(co * 4 + d) * hw..][..hw];
            for y in 0..h {
                for x in 0..w {
                    row[y * w + x] = plane[(2 * y + dy) * ow + 2 * x + dx];
                }
            }
        }
    }
    let gm = ArrayView2::from_shape((cout * 4, hw), &g4).expect("shape");
    {
        let mut gw = ArrayViewMut2::from_shape((input.channels, cout * 4), grad_weight).expect("grad shape");
        gemm(input.matrix(), gm.t(), 1.0, &mut gw);
    }
    let mut grad_in = FeatureMap::zeros(input.channels, h, w);
    let wm = ArrayView2::from_shape((input.channels, cout * 4), weight).expect("weight shape");
    gemm(wm, gm, 0.0, &mut grad_in.matrix_mut());
    grad_in
}

/// 1×1 convolution to a single channel. Returns `H·W` logits.
pub fn conv1x1_single(input: &FeatureMap, weight: &[f32], bias: f32) -> Vec<f32> {
    let hw = input.plane_len();
    let mut out = vec![bias; hw];
    for (c, &wc) in weight.iter().enumerate() {
        let plane = &input.data[c * hw..][..hw];
        out.iter_mut().zip(plane).for_each(|(o, &v)| *o += wc * v);
    }
    out
}

pub fn conv1x1_single_backward(
    input: &FeatureMap,
    weight: &[f32],
    grad_out: &[f32],
    grad_weight: &mut [f32],
    grad_bias: &mut f32,
) -> FeatureMap {
    let hw = input.plane_len();
    *grad_bias += grad_out.iter().sum::<f32>();
    let mut grad_in = FeatureMap::zeros(input.channels, input.height, input.width);
    for (c, &wc) in weight.iter().enumerate() {
        let plane = &input.data[c * hw..][..hw];
        grad_weight[c] += plane.iter().zip(grad_out).map(|(a, b)| a * b).sum::<f32>();
        grad_in.data[c * hw..][..hw]
            .iter_mut()
            .zip(grad_out)
            .for_each(|(g, &d)| *g = wc * d);
    }
    grad_in
}
