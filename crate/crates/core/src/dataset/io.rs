use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use ndarray::{Array2, Array3};

use super::{resize_crop, resize_short_side, CropMode, Sample};
use crate::{par, Error, Mask, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split '{other}' (expected train or test)")),
        }
    }
}

const IMAGE_EXTS: [&str; 4] = ["jpg", "jpeg", "png", "tif"];
const MASK_EXTS: [&str; 3] = ["tif", "tiff", "png"];
/// IDRiD names hard-exudate masks `<id>_EX.tif`.
const MASK_SUFFIXES: [&str; 2] = ["", "_EX"];

/// `<root>/<split>` when it exists, otherwise `<root>` itself.
fn split_dir(root: &Path, split: Split) -> PathBuf {
    let nested = root.join(split.as_str());
    if nested.is_dir() {
        nested
    } else {
        root.to_path_buf()
    }
}

fn find_mask(masks: &Path, id: &str) -> Option<PathBuf> {
    MASK_SUFFIXES.iter().find_map(|suffix| {
        MASK_EXTS
            .iter()
            .map(|ext| masks.join(format!("{id}{suffix}.{ext}")))
            .find(|p| p.is_file())
    })
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    image::load_from_memory(&bytes).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_rgb(path: &Path) -> Result<Array3<f32>> {
    let rgb = open(path)?.to_rgb8();
    let (w, h) = rgb.dimensions();
    Ok(Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        rgb.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
    }))
}

/// Reads a mask image; any nonzero luma is foreground. The second value
/// reports whether the file held values other than 0 and 255/1.
pub fn read_mask(path: &Path) -> Result<(Mask, bool)> {
    let gray = open(path)?.to_luma8();
    let (w, h) = gray.dimensions();
    let mut non_binary = false;
    let mask = Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        let v = gray.get_pixel(x as u32, y as u32)[0];
        non_binary |= !matches!(v, 0 | 1 | 255);
        (v != 0) as u8
    });
    Ok((mask, non_binary))
}

/// Loads `images/` and `masks/` under `root/split` (or `root`), pairing by
/// basename, sorted by id. A directory without an `images/` folder yields an
/// empty list.
pub fn load_idrid_split(root: &Path, split: Split) -> Result<Vec<Sample>> {
    load_split(root, split, LoadResize::Native)
}

/// How [`load_split`] rescales samples as they are read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoadResize {
    Native,
    /// Shorter side to this many pixels, aspect ratio kept.
    ShortSide(usize),
    /// Short side resize followed by a centered square crop.
    Square(usize),
}

/// As [`load_idrid_split`], rescaling each sample as it is read so large
/// originals are never all held at full resolution.
pub fn load_split(root: &Path, split: Split, resize: LoadResize) -> Result<Vec<Sample>> {
    if !root.exists() {
        return Err(Error::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "data root does not exist"),
        ));
    }
    let dir = split_dir(root, split);
    let images_dir = dir.join("images");
    let masks_dir = dir.join("masks");
    if !images_dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut pairs = Vec::new();
    for entry in fs::read_dir(&images_dir).map_err(|e| Error::io(&images_dir, e))? {
        let path = entry.map_err(|e| Error::io(&images_dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if !ext.is_some_and(|e| IMAGE_EXTS.contains(&e.as_str())) {
            continue;
        }
        let id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Shape(format!("non-UTF-8 file name {}", path.display())))?
            .to_string();
        let mask = find_mask(&masks_dir, &id).ok_or(Error::MissingMask { id: id.clone() })?;
        pairs.push((id, path, mask));
    }
    pairs.sort_by(|a, b| a.0.cmp(&b.0));
    let loaded = par::map_slice(&pairs, |(id, img, mask)| -> Result<Sample> {
        let image = read_rgb(img)?;
        let (mask, non_binary) = read_mask(mask)?;
        if non_binary {
            log::debug!("mask for {id} has non-binary values; binarized at > 0");
        }
        let sample = Sample::new(id.clone(), image, mask)?;
        Ok(match resize {
            LoadResize::Native => sample,
            LoadResize::ShortSide(s) => resize_short_side(&sample, s),
            LoadResize::Square(s) => resize_crop(&sample, s, CropMode::Center),
        })
    });
    loaded.into_iter().collect()
}

pub fn write_rgb_png(image: &Array3<f32>, path: &Path) -> Result<()> {
    let (_, h, w) = image.dim();
    let buf: RgbImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let px = |c| (image[[c, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    });
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes a mask as 8-bit grayscale, foreground = 255.
pub fn write_mask_png(mask: &Mask, path: &Path) -> Result<()> {
    let (h, w) = mask.dim();
    let buf: GrayImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Luma([if mask[[y as usize, x as usize]] != 0 { 255 } else { 0 }])
    });
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes samples as `<dir>/images/<id>.png` and `<dir>/masks/<id>.png`.
/// Images are stored losslessly so a reload reproduces them to 8-bit
/// quantization.
pub fn export_dataset(samples: &[Sample], dir: &Path) -> Result<()> {
    let images = dir.join("images");
    let masks = dir.join("masks");
    for d in [&images, &masks] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    for s in samples {
        write_rgb_png(&s.image, &images.join(format!("{}.png", s.id)))?;
        write_mask_png(&s.mask, &masks.join(format!("{}.png", s.id)))?;
    }
    Ok(())
}
