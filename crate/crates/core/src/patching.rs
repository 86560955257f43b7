//! Square grid partition of masks and lesion-density classification.

use ndarray::{s, ArrayView, ArrayView2, Axis, Dimension, IxDyn};
use serde::{Deserialize, Serialize};

use crate::{Error, Mask, Result};

/// Patches with a foreground proportion strictly above this are dense.
pub const DENSE_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DensityClass {
    Dense,
    Sparse,
}

impl DensityClass {
    pub fn from_proportion(proportion: f64) -> Self {
        if proportion > DENSE_THRESHOLD {
            DensityClass::Dense
        } else {
            DensityClass::Sparse
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DensityClass::Dense => "dense",
            DensityClass::Sparse => "sparse",
        }
    }
}

/// Pixel window `(top, left, height, width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Window {
    pub fn area(&self) -> usize {
        self.height * self.width
    }

    fn as_tuple(&self) -> (usize, usize, usize, usize) {
        (self.top, self.left, self.height, self.width)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchInfo {
    pub row: usize,
    pub col: usize,
    pub window: Window,
    pub foreground: usize,
    pub foreground_proportion: f64,
    pub density_class: DensityClass,
}

impl PatchInfo {
    /// Row-major patch index in `0..n²`.
    pub fn index(&self, n: usize) -> usize {
        self.row * n + self.col
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub n: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    /// Row-major, `n*n` entries.
    pub entries: Vec<PatchInfo>,
}

impl PatchGrid {
    pub fn get(&self, row: usize, col: usize) -> &PatchInfo {
        &self.entries[row * self.n + col]
    }

    pub fn height(&self) -> usize {
        self.patch_h * self.n
    }

    pub fn width(&self) -> usize {
        self.patch_w * self.n
    }

    pub fn count(&self, class: DensityClass) -> usize {
        self.entries
            .iter()
            .filter(|p| p.density_class == class)
            .count()
    }

    /// Debug dump: one `row,col,proportion,class` line per patch.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("row,col,proportion,class\n");
        for p in &self.entries {
            out.push_str(&format!(
                "{},{},{:.6},{}\n",
                p.row,
                p.col,
                p.foreground_proportion,
                p.density_class.as_str()
            ));
        }
        out
    }
}

/// Splits `mask` into an `n×n` grid of equal windows. Dimensions must be
/// divisible by `n`; nothing is padded.
pub fn partition(mask: &Mask, n: usize) -> Result<PatchGrid> {
    let (height, width) = mask.dim();
    if n == 0 || height % n != 0 || width % n != 0 || height == 0 || width == 0 {
        return Err(Error::NonDivisible { height, width, n });
    }
    let (patch_h, patch_w) = (height / n, width / n);
    let mut entries = Vec::with_capacity(n * n);
    for row in 0..n {
        for col in 0..n {
            let window = Window {
                top: row * patch_h,
                left: col * patch_w,
                height: patch_h,
                width: patch_w,
            };
            let foreground = window_view(mask.view(), &window)
                .iter()
                .filter(|&&v| v != 0)
                .count();
            let foreground_proportion = foreground as f64 / window.area() as f64;
            entries.push(PatchInfo {
                row,
                col,
                window,
                foreground,
                foreground_proportion,
                density_class: DensityClass::from_proportion(foreground_proportion),
            });
        }
    }
    Ok(PatchGrid {
        n,
        patch_h,
        patch_w,
        entries,
    })
}

fn window_view<'a, T>(a: ArrayView2<'a, T>, w: &Window) -> ArrayView2<'a, T> {
    a.slice_move(s![w.top..w.top + w.height, w.left..w.left + w.width])
}

/// Returns the sub-window of `array` selected by `info`. The first two
/// axes are taken as `H×W`; trailing axes (channels) are kept whole.
pub fn patch_view<'a, T, D: Dimension>(
    array: ArrayView<'a, T, D>,
    info: &PatchInfo,
) -> Result<ArrayView<'a, T, IxDyn>> {
    let array = array.into_dyn();
    let shape = array.shape();
    let w = info.window;
    let (height, width) = match shape {
        [h, w, ..] => (*h, *w),
        _ => {
            return Err(Error::Shape(format!(
                "patch_view needs at least 2 axes, got {}",
                shape.len()
            )))
        }
    };
    if w.top + w.height > height || w.left + w.width > width {
        return Err(Error::OutOfBounds {
            window: w.as_tuple(),
            height,
            width,
        });
    }
    let mut view = array;
    view.slice_axis_inplace(Axis(0), (w.top..w.top + w.height).into());
    view.slice_axis_inplace(Axis(1), (w.left..w.left + w.width).into());
    Ok(view)
}
