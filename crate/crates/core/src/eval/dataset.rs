//! Image/mask datasets and their PNG storage.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use image::imageops::{self, FilterType};
use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Fraction of mask pixels allowed strictly between 16 and 239.
const MAX_GRAY_FRACTION: f64 = 0.05;

/// One object: RGB image in `[0, 1]`, binary mask and, for synthetic data,
/// the union of the other objects in the scene.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Tensor,
    pub mask: Tensor,
    pub others: Option<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    domain: String,
    samples: Vec<Sample>,
}

impl Dataset {
    /// Validates ids, value ranges and shapes.
    pub fn new(domain: impl Into<String>, samples: Vec<Sample>) -> Result<Self> {
        let mut seen = HashSet::new();
        for s in &samples {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::Dataset(format!("duplicate id `{}`", s.id)));
            }
            if s.image.rank() != 3 || s.image.shape()[0] != 3 {
                return Err(Error::Dataset(format!("{}: image must be [3, H, W]", s.id)));
            }
            let hw = &s.image.shape()[1..];
            s.mask.expect_shape("dataset", hw)?;
            if let Some(o) = &s.others {
                o.expect_shape("dataset", hw)?;
            }
            if s.image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Dataset(format!("{}: image values outside [0, 1]", s.id)));
            }
            if s.mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::Dataset(format!("{}: mask is not binary", s.id)));
            }
        }
        Ok(Self {
            domain: domain.into(),
            samples,
        })
    }

    pub fn domain(&self) -> &str {
        &self.domain
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Dataset with samples in the given index order.
    pub fn reordered(&self, order: &[usize]) -> Result<Self> {
        let samples = order
            .iter()
            .map(|&i| {
                self.samples
                    .get(i)
                    .cloned()
                    .ok_or_else(|| Error::Dataset(format!("index {i} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(self.domain.clone(), samples)
    }

    /// First `n` samples.
    pub fn head(&self, n: usize) -> Self {
        Self {
            domain: self.domain.clone(),
            samples: self.samples.iter().take(n).cloned().collect(),
        }
    }
}

fn png_stems(dir: &Path) -> Result<BTreeMap<String, std::path::PathBuf>> {
    let mut out = BTreeMap::new();
    if !dir.is_dir() {
        return Err(Error::Dataset(format!("missing directory {}", dir.display())));
    }
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path.clone());
            }
        }
    }
    Ok(out)
}

pub fn rgb_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = f64::from(px[c]) / 255.0;
        }
    }
    Tensor::from_raw(vec![3, h, w], data)
}

pub fn tensor_to_rgb(t: &Tensor) -> Result<RgbImage> {
    if t.rank() != 3 || t.shape()[0] != 3 {
        return Err(Error::Dataset("image tensor must be [3, H, W]".into()));
    }
    let (h, w) = (t.shape()[1], t.shape()[2]);
    Ok(ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let px = |c| (t.at3(c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    }))
}

/// Binary `[H, W]` mask as a 0/255 grayscale image.
pub fn mask_to_gray(t: &Tensor) -> Result<GrayImage> {
    if t.rank() != 2 {
        return Err(Error::Dataset("mask tensor must be [H, W]".into()));
    }
    let (h, w) = (t.shape()[0], t.shape()[1]);
    Ok(ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Luma([if t.at2(y as usize, x as usize) >= 0.5 { 255 } else { 0 }])
    }))
}

fn gray_to_mask(img: &GrayImage) -> Tensor {
    let data = img.pixels().map(|p| if p[0] >= 128 { 1.0 } else { 0.0 }).collect();
    Tensor::from_raw(vec![img.height() as usize, img.width() as usize], data)
}

/// Loads `images/NAME.png` and `masks/NAME.png` pairs, resized to
/// `size × size` (bilinear for images, nearest for masks).
pub fn load_dataset(dir: impl AsRef<Path>, size: usize) -> Result<Dataset> {
    let dir = dir.as_ref();
    let images = png_stems(&dir.join("images"))?;
    let masks = png_stems(&dir.join("masks"))?;
    if images.is_empty() {
        return Err(Error::Dataset(format!("no images in {}", dir.display())));
    }
    for stem in images.keys().chain(masks.keys()) {
        if !(images.contains_key(stem) && masks.contains_key(stem)) {
            return Err(Error::Dataset(format!("unpaired file `{stem}`")));
        }
    }
    let side = size as u32;
    let mut samples = Vec::with_capacity(images.len());
    for (stem, img_path) in &images {
        let rgb = image::open(img_path)?.to_rgb8();
        let gray = image::open(&masks[stem])?.to_luma8();
        let grayish = gray.pixels().filter(|p| (16..240).contains(&p[0])).count();
        if grayish as f64 > MAX_GRAY_FRACTION * gray.len() as f64 {
            return Err(Error::Dataset(format!("mask `{stem}` is not binary-like")));
        }
        let rgb = if rgb.dimensions() == (side, side) {
            rgb
        } else {
            imageops::resize(&rgb, side, side, FilterType::Triangle)
        };
        let gray = if gray.dimensions() == (side, side) {
            gray
        } else {
            imageops::resize(&gray, side, side, FilterType::Nearest)
        };
        samples.push(Sample {
            id: stem.clone(),
            image: rgb_to_tensor(&rgb),
            mask: gray_to_mask(&gray),
            others: None,
        });
    }
    let domain = dir.file_name().and_then(|n| n.to_str()).unwrap_or("disk").to_string();
    Dataset::new(domain, samples)
}

/// Writes the dataset in the layout read by [`load_dataset`].
pub fn save_dataset(dataset: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("masks"))?;
    for s in dataset.samples() {
        tensor_to_rgb(&s.image)?.save(dir.join("images").join(format!("{}.png", s.id)))?;
        mask_to_gray(&s.mask)?.save(dir.join("masks").join(format!("{}.png", s.id)))?;
    }
    Ok(())
}
