//! Binary erosion and dilation, and per-patch inner/outer contour bands.
//!
//! Pixels outside the array are treated as background for both operators.

use ndarray::{s, Array2, ArrayView2};

use crate::patching::{DensityClass, PatchGrid};
use crate::{par, Error, Mask, Result};

/// Set of `(dy, dx)` offsets. Always contains the origin and is closed
/// under negation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StructuringElement {
    offsets: Vec<(isize, isize)>,
}

impl StructuringElement {
    pub fn new(offsets: impl IntoIterator<Item = (isize, isize)>) -> Result<Self> {
        let mut offsets: Vec<_> = offsets.into_iter().collect();
        offsets.sort_unstable();
        offsets.dedup();
        if offsets.binary_search(&(0, 0)).is_err() {
            return Err(Error::Shape(
                "structuring element must contain (0, 0)".into(),
            ));
        }
        if let Some(o) = offsets
            .iter()
            .find(|&&(dy, dx)| offsets.binary_search(&(-dy, -dx)).is_err())
        {
            return Err(Error::Shape(format!(
                "structuring element is not symmetric: {o:?} has no mirror"
            )));
        }
        Ok(Self { offsets })
    }

    /// 3×3 square, 8-connected.
    pub fn square3() -> Self {
        let offsets = (-1..=1).flat_map(|dy| (-1..=1).map(move |dx| (dy, dx)));
        Self::new(offsets).expect("square is symmetric")
    }

    /// 3×3 cross, 4-connected.
    pub fn cross3() -> Self {
        Self::new([(0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)]).expect("cross is symmetric")
    }

    pub fn offsets(&self) -> &[(isize, isize)] {
        &self.offsets
    }
}

impl Default for StructuringElement {
    fn default() -> Self {
        Self::square3()
    }
}

#[inline]
fn at(m: &ArrayView2<u8>, y: isize, x: isize) -> bool {
    let (h, w) = m.dim();
    y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && m[[y as usize, x as usize]] != 0
}

fn step(m: ArrayView2<u8>, se: &StructuringElement, erode: bool) -> Mask {
    Array2::from_shape_fn(m.dim(), |(y, x)| {
        let (y, x) = (y as isize, x as isize);
        let mut hits = se.offsets.iter().map(|&(dy, dx)| at(&m, y + dy, x + dx));
        let on = if erode {
            hits.all(|b| b)
        } else {
            hits.any(|b| b)
        };
        on as u8
    })
}

/// Pixel stays 1 iff every structuring-element neighbour is 1.
pub fn erode(mask: ArrayView2<u8>, se: &StructuringElement, iterations: usize) -> Mask {
    let mut cur = mask.to_owned();
    for _ in 0..iterations {
        cur = step(cur.view(), se, true);
    }
    cur
}

/// Pixel becomes 1 iff any structuring-element neighbour is 1.
pub fn dilate(mask: ArrayView2<u8>, se: &StructuringElement, iterations: usize) -> Mask {
    let mut cur = mask.to_owned();
    for _ in 0..iterations {
        cur = step(cur.view(), se, false);
    }
    cur
}

pub fn complement(mask: ArrayView2<u8>) -> Mask {
    mask.mapv(|v| (v == 0) as u8)
}

/// `(erosion, dilation)` iteration counts for a patch class.
pub const fn contour_iterations(class: DensityClass) -> (usize, usize) {
    match class {
        DensityClass::Dense => (2, 2),
        DensityClass::Sparse => (1, 5),
    }
}

/// Inner (lesion side) and outer (background side) boundary bands.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContourPair {
    pub inner: Mask,
    pub outer: Mask,
}

impl ContourPair {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            inner: Array2::zeros((height, width)),
            outer: Array2::zeros((height, width)),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.inner.iter().all(|&v| v == 0) && self.outer.iter().all(|&v| v == 0)
    }
}

/// Contours of a single patch mask using the 3×3 square element.
pub fn patch_contours(patch_mask: ArrayView2<u8>, class: DensityClass) -> ContourPair {
    patch_contours_with(patch_mask, class, &StructuringElement::square3())
}

pub fn patch_contours_with(
    patch_mask: ArrayView2<u8>,
    class: DensityClass,
    se: &StructuringElement,
) -> ContourPair {
    let (h, w) = patch_mask.dim();
    if patch_mask.iter().all(|&v| v == 0) {
        return ContourPair::zeros(h, w);
    }
    let (e_iters, d_iters) = contour_iterations(class);
    let eroded = erode(patch_mask, se, e_iters);
    let dilated = dilate(patch_mask, se, d_iters);
    let inner = Array2::from_shape_fn((h, w), |ix| {
        (patch_mask[ix] != 0 && eroded[ix] == 0) as u8
    });
    let outer = Array2::from_shape_fn((h, w), |ix| {
        (dilated[ix] != 0 && patch_mask[ix] == 0) as u8
    });
    ContourPair { inner, outer }
}

/// Runs [`patch_contours`] independently on every grid patch and writes the
/// results into two full-resolution masks.
pub fn compose_contours(grid: &PatchGrid, gt_mask: &Mask) -> Result<ContourPair> {
    let (h, w) = gt_mask.dim();
    if grid.height() != h || grid.width() != w {
        return Err(Error::Shape(format!(
            "grid covers {}x{} but mask is {h}x{w}",
            grid.height(),
            grid.width()
        )));
    }
    let se = StructuringElement::square3();
    let pieces = par::map_slice(&grid.entries, |p| {
        let win = p.window;
        if p.foreground == 0 {
            return None;
        }
        let view = gt_mask.slice(s![
            win.top..win.top + win.height,
            win.left..win.left + win.width
        ]);
        Some(patch_contours_with(view, p.density_class, &se))
    });
    let mut out = ContourPair::zeros(h, w);
    for (p, piece) in grid.entries.iter().zip(pieces) {
        let Some(piece) = piece else { continue };
        let win = p.window;
        let region = s![
            win.top..win.top + win.height,
            win.left..win.left + win.width
        ];
        out.inner.slice_mut(region).assign(&piece.inner);
        out.outer.slice_mut(region).assign(&piece.outer);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patching::partition;
    use proptest::prelude::*;

    fn count(m: &Mask) -> usize {
        m.iter().filter(|&&v| v != 0).count()
    }

    fn single_pixel(size: usize, y: usize, x: usize) -> Mask {
        let mut m = Array2::zeros((size, size));
        m[[y, x]] = 1;
        m
    }

    #[test]
    fn isolated_pixel_erodes_away() {
        let m = single_pixel(7, 3, 3);
        assert_eq!(count(&erode(m.view(), &StructuringElement::square3(), 1)), 0);
    }

    #[test]
    fn single_pixel_dilates_to_block() {
        let m = single_pixel(7, 3, 3);
        let d = dilate(m.view(), &StructuringElement::square3(), 1);
        assert_eq!(count(&d), 9);
        assert!(d.slice(s![2..5, 2..5]).iter().all(|&v| v == 1));
    }

    #[test]
    fn block_erodes_to_interior() {
        let mut m = Array2::zeros((8, 8));
        m.slice_mut(s![2..6, 2..6]).fill(1);
        let e = erode(m.view(), &StructuringElement::square3(), 1);
        let mut want = Array2::zeros((8, 8));
        want.slice_mut(s![3..5, 3..5]).fill(1);
        assert_eq!(e, want);
    }

    #[test]
    fn zero_iterations_is_identity() {
        let mut m = Array2::zeros((5, 5));
        m[[0, 1]] = 1;
        m[[4, 4]] = 1;
        let se = StructuringElement::square3();
        assert_eq!(erode(m.view(), &se, 0), m);
        assert_eq!(dilate(m.view(), &se, 0), m);
        let z: Mask = Array2::zeros((5, 5));
        assert_eq!(dilate(z.view(), &se, 4), z);
    }

    #[test]
    fn border_touching_lesion_does_not_grow_outward() {
        let mut m = Array2::zeros((4, 4));
        m.row_mut(0).fill(1);
        let e = erode(m.view(), &StructuringElement::square3(), 1);
        assert_eq!(count(&e), 0);
    }

    #[test]
    fn asymmetric_element_is_rejected() {
        assert!(StructuringElement::new([(0, 0), (0, 1)]).is_err());
        assert!(StructuringElement::new([(0, 1), (0, -1)]).is_err());
        assert_eq!(StructuringElement::cross3().offsets().len(), 5);
    }

    #[test]
    fn empty_sparse_patch_has_no_contours() {
        let z: Mask = Array2::zeros((16, 16));
        assert!(patch_contours(z.view(), DensityClass::Sparse).is_empty());
    }

    #[test]
    fn single_pixel_sparse_patch() {
        let m = single_pixel(16, 8, 8);
        let c = patch_contours(m.view(), DensityClass::Sparse);
        assert_eq!(c.inner, m);
        assert_eq!(count(&c.outer), 120);
        assert_eq!(c.outer[[8, 8]], 0);
    }

    #[test]
    fn solid_dense_block() {
        let mut m = Array2::zeros((12, 12));
        m.slice_mut(s![3..9, 3..9]).fill(1);
        let c = patch_contours(m.view(), DensityClass::Dense);
        assert_eq!(count(&c.inner), 32);
        // 10x10 after two dilation steps minus the 6x6 block
        assert_eq!(count(&c.outer), 64);
    }

    #[test]
    fn compose_places_single_patch() {
        let mut gt = Array2::zeros((32, 32));
        gt.slice_mut(s![9..12, 18..22]).fill(1);
        let grid = partition(&gt, 4).unwrap();
        let composed = compose_contours(&grid, &gt).unwrap();
        let p = grid.get(1, 2);
        let local = patch_contours(gt.slice(s![8..16, 16..24]), p.density_class);
        let mut want = ContourPair::zeros(32, 32);
        want.inner.slice_mut(s![8..16, 16..24]).assign(&local.inner);
        want.outer.slice_mut(s![8..16, 16..24]).assign(&local.outer);
        assert_eq!(composed, want);
        let empty = compose_contours(&grid, &Array2::zeros((32, 32))).unwrap();
        assert!(empty.is_empty());
    }

    #[test]
    fn compose_rejects_mismatched_grid() {
        let grid = partition(&Array2::zeros((16, 16)), 4).unwrap();
        assert!(compose_contours(&grid, &Array2::zeros((32, 32))).is_err());
    }

    fn arb_mask(side: usize) -> impl Strategy<Value = Mask> {
        prop::collection::vec(prop::bool::weighted(0.4), side * side).prop_map(move |v| {
            Array2::from_shape_vec((side, side), v.into_iter().map(u8::from).collect()).unwrap()
        })
    }

    proptest! {
        #[test]
        fn extensivity_and_monotonicity(a in arb_mask(12), b in arb_mask(12), k in 1usize..4) {
            let se = StructuringElement::square3();
            let union = Array2::from_shape_fn(a.dim(), |ix| a[ix] | b[ix]);
            let (ea, da) = (erode(a.view(), &se, k), dilate(a.view(), &se, k));
            let (eu, du) = (erode(union.view(), &se, k), dilate(union.view(), &se, k));
            for ix in ndarray::indices(a.dim()) {
                prop_assert!(ea[ix] <= a[ix] && a[ix] <= da[ix]);
                prop_assert!(ea[ix] <= eu[ix] && da[ix] <= du[ix]);
            }
        }

        #[test]
        fn contours_partition_patch(m in arb_mask(16), dense in any::<bool>()) {
            let class = if dense { DensityClass::Dense } else { DensityClass::Sparse };
            let c = patch_contours(m.view(), class);
            let (e_it, _) = contour_iterations(class);
            let core = erode(m.view(), &StructuringElement::square3(), e_it);
            for ix in ndarray::indices(m.dim()) {
                prop_assert_eq!(c.inner[ix] + core[ix], m[ix]);
                prop_assert!(!(c.outer[ix] == 1 && m[ix] == 1));
            }
        }

        #[test]
        fn duality_on_framed_masks(m in arb_mask(14), k in 1usize..4) {
            let mut framed: Mask = Array2::zeros((16, 16));
            framed.slice_mut(s![1..15, 1..15]).assign(&m);
            let se = StructuringElement::square3();
            let lhs = erode(framed.view(), &se, k);
            let rhs = complement(dilate(complement(framed.view()).view(), &se, k).view());
            prop_assert_eq!(lhs, rhs);
        }
    }
}
