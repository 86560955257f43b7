//! Image/mask pairs: loading, synthetic generation, augmentation.

mod augment;
mod io;
mod synthetic;

pub use augment::{augment, resize_crop, resize_short_side, AugmentationConfig, CropMode};
pub use io::{export_dataset, load_idrid_split, load_split, read_mask, write_mask_png, write_rgb_png, LoadResize, Split};
pub use synthetic::{make_synthetic_dataset, synthetic_sample_layers, SyntheticLayers};

use ndarray::Array3;

use crate::{Error, Mask, Result};

/// An RGB image (`3×H×W`, values in `[0, 1]`) with its binary mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Array3<f32>,
    pub mask: Mask,
}

impl Sample {
    /// Builds a sample, checking shapes and binarity.
    pub fn new(id: impl Into<String>, image: Array3<f32>, mask: Mask) -> Result<Self> {
        let s = Self {
            id: id.into(),
            image,
            mask,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.image.dim();
        if c != 3 {
            return Err(Error::Shape(format!("sample {}: expected 3 channels, got {c}", self.id)));
        }
        if (h, w) != self.mask.dim() {
            return Err(Error::Shape(format!(
                "sample {}: image is {h}x{w}, mask is {:?}",
                self.id,
                self.mask.dim()
            )));
        }
        if self.mask.iter().any(|&v| v > 1) {
            return Err(Error::Shape(format!("sample {}: mask is not binary", self.id)));
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.mask.nrows()
    }

    pub fn width(&self) -> usize {
        self.mask.ncols()
    }

    pub fn foreground_proportion(&self) -> f64 {
        self.mask.iter().filter(|&&v| v != 0).count() as f64 / self.mask.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn sample_checks_shapes_and_binarity() {
        let img = Array3::<f32>::zeros((3, 4, 4));
        assert!(Sample::new("a", img.clone(), Array2::zeros((4, 4))).is_ok());
        assert!(Sample::new("a", img.clone(), Array2::zeros((4, 5))).is_err());
        assert!(Sample::new("a", img, Array2::from_elem((4, 4), 2)).is_err());
        assert!(Sample::new("a", Array3::zeros((1, 4, 4)), Array2::zeros((4, 4))).is_err());
    }
}
