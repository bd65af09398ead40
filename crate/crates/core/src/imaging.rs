//! Rasters shared across the pipeline: RGB records, binary masks, label maps,
//! and their PNG encodings.

use std::path::{Path, PathBuf};

use image::{imageops, ImageBuffer, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::nn::{Scalar, Tensor4};
use crate::{Error, Result};

/// Working resolution of every pipeline stage.
pub const WORKING_SIZE: u32 = 240;

/// Integer pixel coordinate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Point {
    pub x: usize,
    pub y: usize,
}

impl Point {
    pub fn new(x: usize, y: usize) -> Self {
        Self { x, y }
    }
}

/// Binary raster, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![false; width * height] }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::shape("Mask::from_vec", format!("{}x{} vs {} values", width, height, data.len())));
        }
        Ok(Self { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let data = (0..height).flat_map(|y| (0..width).map(move |x| (x, y))).map(|(x, y)| f(x, y)).collect();
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn contains(&self, p: Point) -> bool {
        p.x < self.width && p.y < self.height && self.get(p.x, p.y)
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn complement(&self) -> Self {
        Self { width: self.width, height: self.height, data: self.data.iter().map(|b| !b).collect() }
    }

    pub fn same_extents(&self, other: &Mask) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Member pixels in row-major order.
    pub fn points(&self) -> impl Iterator<Item = Point> + '_ {
        self.data.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| Point::new(i % self.width, i / self.width))
    }

    pub fn to_png(&self, path: &Path) -> Result<()> {
        let img: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_raw(
            self.width as u32,
            self.height as u32,
            self.data.iter().map(|&b| if b { 255 } else { 0 }).collect(),
        )
        .expect("buffer length matches extents");
        img.save(path)?;
        Ok(())
    }

    /// Decode any PNG, binarizing luminance at 128 (values >= 128 are members).
    pub fn from_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_luma8();
        Ok(Self::from_luma(&img))
    }

    pub fn from_luma(img: &ImageBuffer<Luma<u8>, Vec<u8>>) -> Self {
        Self {
            width: img.width() as usize,
            height: img.height() as usize,
            data: img.as_raw().iter().map(|&v| v >= 128).collect(),
        }
    }

    /// Nearest-neighbour resample to new extents.
    pub fn resize_nearest(&self, width: usize, height: usize) -> Self {
        Self::from_fn(width, height, |x, y| {
            let sx = ((x as f64 + 0.5) * self.width as f64 / width as f64).floor() as usize;
            let sy = ((y as f64 + 0.5) * self.height as f64 / height as f64).floor() as usize;
            self.get(sx.min(self.width - 1), sy.min(self.height - 1))
        })
    }
}

/// Per-pixel integer labels, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u32>,
}

impl LabelMap {
    pub fn new(width: usize, height: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != width * height {
            return Err(Error::shape("LabelMap::new", format!("{}x{} vs {} labels", width, height, labels.len())));
        }
        Ok(Self { width, height, labels })
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    pub fn mask_of(&self, label: u32) -> Mask {
        Mask { width: self.width, height: self.height, data: self.labels.iter().map(|&l| l == label).collect() }
    }

    /// Sorted distinct labels present.
    pub fn distinct(&self) -> Vec<u32> {
        let mut v = self.labels.clone();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// 16-bit grayscale PNG; labels must fit in `u16`.
    pub fn to_png16(&self, path: &Path) -> Result<()> {
        let raw = self
            .labels
            .iter()
            .map(|&l| u16::try_from(l).map_err(|_| Error::InvalidArgument(format!("label {l} exceeds 16 bits"))))
            .collect::<Result<Vec<u16>>>()?;
        let img: ImageBuffer<Luma<u16>, Vec<u16>> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, raw).expect("buffer length matches extents");
        img.save(path)?;
        Ok(())
    }

    pub fn from_png16(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_luma16();
        Ok(Self {
            width: img.width() as usize,
            height: img.height() as usize,
            labels: img.as_raw().iter().map(|&v| u32::from(v)).collect(),
        })
    }

    /// Pixels whose right or lower neighbour carries a different label.
    pub fn boundaries(&self) -> Mask {
        Mask::from_fn(self.width, self.height, |x, y| {
            let l = self.get(x, y);
            (x + 1 < self.width && self.get(x + 1, y) != l) || (y + 1 < self.height && self.get(x, y + 1) != l)
        })
    }
}

/// A loaded, resized RGB image with its identifiers and optional annotations.
#[derive(Clone, Debug)]
pub struct ImageRecord {
    pub id: String,
    pub pixels: RgbImage,
    pub source: PathBuf,
    pub ground_truth: Option<Mask>,
    pub click: Option<Point>,
}

impl ImageRecord {
    pub fn new(id: impl Into<String>, pixels: RgbImage) -> Self {
        Self { id: id.into(), pixels, source: PathBuf::new(), ground_truth: None, click: None }
    }

    pub fn width(&self) -> usize {
        self.pixels.width() as usize
    }

    pub fn height(&self) -> usize {
        self.pixels.height() as usize
    }

    pub fn pixel_count(&self) -> usize {
        self.width() * self.height()
    }

    /// `1 x 3 x H x W` tensor with channels scaled to `[0, 1]`.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor4<T> {
        rgb_to_tensor(&self.pixels)
    }
}

pub fn rgb_to_tensor<T: Scalar>(img: &RgbImage) -> Tensor4<T> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor4::zeros([1, 3, h, w]);
    let plane = w * h;
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            t.data_mut()[c * plane + i] = T::from_f64(f64::from(px[c]) / 255.0);
        }
    }
    t
}

/// Bilinear resize to the working resolution (no-op when already there).
pub fn resize_to_working(img: &RgbImage) -> RgbImage {
    if img.width() == WORKING_SIZE && img.height() == WORKING_SIZE {
        return img.clone();
    }
    imageops::resize(img, WORKING_SIZE, WORKING_SIZE, imageops::FilterType::Triangle)
}

/// Grayscale copy replicated to three channels.
pub fn gray_to_rgb(img: &ImageBuffer<Luma<u8>, Vec<u8>>) -> RgbImage {
    RgbImage::from_fn(img.width(), img.height(), |x, y| {
        let v = img.get_pixel(x, y)[0];
        Rgb([v, v, v])
    })
}

/// Blend `color` over the masked pixels with weight `alpha`.
pub fn overlay(img: &RgbImage, mask: &Mask, color: [u8; 3], alpha: f64) -> RgbImage {
    let mut out = img.clone();
    for p in mask.points() {
        let px = out.get_pixel_mut(p.x as u32, p.y as u32);
        for c in 0..3 {
            px[c] = (alpha * f64::from(color[c]) + (1.0 - alpha) * f64::from(px[c])).round() as u8;
        }
    }
    out
}
