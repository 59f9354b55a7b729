//! Planar float images, dual-fisheye frames and PNG I/O.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use crate::{Error, Result};

pub const CHANNELS: usize = 3;

/// RGB image stored as three row-major `f32` planes.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; CHANNELS * width * height],
        }
    }

    pub fn square(width: usize) -> Self {
        Self::new(width, width)
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut img = Self::new(width, height);
        for (c, plane) in img.data.chunks_mut(width * height).enumerate() {
            plane.fill(rgb[c]);
        }
        img
    }

    pub fn from_planes(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != CHANNELS * width * height {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {width}x{height} RGB image",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Builds an image from an `(row, col) -> rgb` function.
    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> [f32; 3]) -> Self {
        let mut img = Self::new(width, height);
        for row in 0..height {
            for col in 0..width {
                img.set(row, col, f(row, col));
            }
        }
        img
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.pixels();
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> [f32; 3] {
        let n = self.pixels();
        let k = row * self.width + col;
        [self.data[k], self.data[n + k], self.data[2 * n + k]]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, rgb: [f32; 3]) {
        let n = self.pixels();
        let k = row * self.width + col;
        self.data[k] = rgb[0];
        self.data[n + k] = rgb[1];
        self.data[2 * n + k] = rgb[2];
    }

    /// Pixel by flat index `row * width + col`.
    #[inline]
    pub fn get_flat(&self, k: usize) -> [f32; 3] {
        let n = self.pixels();
        [self.data[k], self.data[n + k], self.data[2 * n + k]]
    }

    #[inline]
    pub fn set_flat(&mut self, k: usize, rgb: [f32; 3]) {
        let n = self.pixels();
        self.data[k] = rgb[0];
        self.data[n + k] = rgb[1];
        self.data[2 * n + k] = rgb[2];
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Zeroes every pixel where `keep` is false.
    pub fn apply_mask(&mut self, keep: &[bool]) {
        let n = self.pixels();
        assert_eq!(keep.len(), n);
        for plane in self.data.chunks_mut(n) {
            for (v, &k) in plane.iter_mut().zip(keep) {
                if !k {
                    *v = 0.0;
                }
            }
        }
    }

    /// Values quantized the way they are written to 8-bit files.
    pub fn quantized(&self) -> Image {
        let mut out = self.clone();
        for v in &mut out.data {
            *v = quantize(*v) as f32 / 255.0;
        }
        out
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let mut out = RgbImage::new(self.width as u32, self.height as u32);
        for row in 0..self.height {
            for col in 0..self.width {
                let [r, g, b] = self.get(row, col);
                out.put_pixel(
                    col as u32,
                    row as u32,
                    Rgb([quantize(r), quantize(g), quantize(b)]),
                );
            }
        }
        out
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        Self::from_fn(w, h, |row, col| {
            let p = img.get_pixel(col as u32, row as u32).0;
            [p[0] as f32 / 255.0, p[1] as f32 / 255.0, p[2] as f32 / 255.0]
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save(path)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingImage(path.to_path_buf()));
        }
        Ok(Self::from_rgb8(&image::open(path)?.to_rgb8()))
    }

    /// Copy of the `width`x`height` window at `(row0, col0)`.
    pub fn crop(&self, row0: usize, col0: usize, width: usize, height: usize) -> Image {
        Image::from_fn(width, height, |r, c| self.get(row0 + r, col0 + c))
    }

    /// Concatenates images of equal height left to right.
    pub fn hconcat(parts: &[&Image]) -> Result<Image> {
        let height = parts.first().map_or(0, |p| p.height);
        if parts.iter().any(|p| p.height != height) {
            return Err(Error::ShapeMismatch("hconcat needs equal heights".into()));
        }
        let width = parts.iter().map(|p| p.width).sum();
        let mut out = Image::new(width, height);
        let mut col0 = 0;
        for p in parts {
            for row in 0..height {
                for col in 0..p.width {
                    out.set(row, col0 + col, p.get(row, col));
                }
            }
            col0 += p.width;
        }
        Ok(out)
    }
}

#[inline]
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Front and back circular fisheye images of one capture.
#[derive(Clone, Debug, PartialEq)]
pub struct FisheyeFrame {
    pub front: Image,
    pub back: Image,
}

impl FisheyeFrame {
    pub fn new(front: Image, back: Image) -> Result<Self> {
        if front.width != front.height || back.width != back.height {
            return Err(Error::ShapeMismatch("fisheye images must be square".into()));
        }
        if front.width != back.width {
            return Err(Error::ResolutionMismatch(front.width, back.width));
        }
        let mut f = Self { front, back };
        f.front.clamp01();
        f.back.clamp01();
        Ok(f)
    }

    pub fn blank(width: usize) -> Self {
        Self {
            front: Image::square(width),
            back: Image::square(width),
        }
    }

    pub fn resolution(&self) -> usize {
        self.front.width
    }

    pub fn lens(&self, lens: Lens) -> &Image {
        match lens {
            Lens::Front => &self.front,
            Lens::Back => &self.back,
        }
    }

    /// Front on the left, back on the right.
    pub fn side_by_side(&self) -> Image {
        Image::hconcat(&[&self.front, &self.back]).expect("equal heights")
    }

    pub fn from_side_by_side(img: &Image) -> Result<Self> {
        let w = img.height;
        if img.width != 2 * w {
            return Err(Error::ShapeMismatch(format!(
                "side-by-side frame must be W x 2W, got {}x{}",
                img.height, img.width
            )));
        }
        Self::new(img.crop(0, 0, w, w), img.crop(0, w, w, w))
    }

    pub fn quantized(&self) -> FisheyeFrame {
        FisheyeFrame {
            front: self.front.quantized(),
            back: self.back.quantized(),
        }
    }

    pub fn save_side_by_side(&self, path: &Path) -> Result<()> {
        self.side_by_side().save_png(path)
    }

    pub fn save_pair(&self, front: &Path, back: &Path) -> Result<()> {
        self.front.save_png(front)?;
        self.back.save_png(back)
    }

    /// Loads either one side-by-side PNG, or `<stem>_front.png` and
    /// `<stem>_back.png` when `path` names a missing file or the `_front` half.
    pub fn load(path: &Path) -> Result<Self> {
        if let Some((front, back)) = split_pair_paths(path) {
            if front.exists() && back.exists() && !is_plain_existing(path, &front) {
                return Self::load_pair(&front, &back);
            }
        }
        Self::from_side_by_side(&Image::load_png(path)?)
    }

    pub fn load_pair(front: &Path, back: &Path) -> Result<Self> {
        Self::new(Image::load_png(front)?, Image::load_png(back)?)
    }
}

fn is_plain_existing(path: &Path, front: &Path) -> bool {
    path.exists() && path != front
}

/// `x.png` or `x_front.png` -> (`x_front.png`, `x_back.png`).
fn split_pair_paths(path: &Path) -> Option<(PathBuf, PathBuf)> {
    let stem = path.file_stem()?.to_str()?;
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("png");
    let base = stem.strip_suffix("_front").unwrap_or(stem);
    let dir = path.parent().unwrap_or(Path::new(""));
    Some((
        dir.join(format!("{base}_front.{ext}")),
        dir.join(format!("{base}_back.{ext}")),
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Lens {
    Front,
    Back,
}

/// Per-pixel keep/drop masks for both lenses. Dropped pixels are excluded
/// from image costs.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameMask {
    pub width: usize,
    pub front: Vec<bool>,
    pub back: Vec<bool>,
}

impl FrameMask {
    pub fn all(width: usize) -> Self {
        Self {
            width,
            front: vec![true; width * width],
            back: vec![true; width * width],
        }
    }

    pub fn lens(&self, lens: Lens) -> &[bool] {
        match lens {
            Lens::Front => &self.front,
            Lens::Back => &self.back,
        }
    }

    pub fn count(&self) -> usize {
        self.front.iter().chain(&self.back).filter(|&&k| k).count()
    }

    /// 1.0 for kept pixels, 0.0 for dropped, front plane then back plane.
    pub fn weights(&self) -> Vec<f32> {
        self.front
            .iter()
            .chain(&self.back)
            .map(|&k| if k { 1.0 } else { 0.0 })
            .collect()
    }

    pub fn and(&self, other: &FrameMask) -> FrameMask {
        assert_eq!(self.width, other.width);
        let and = |a: &[bool], b: &[bool]| a.iter().zip(b).map(|(&x, &y)| x && y).collect();
        FrameMask {
            width: self.width,
            front: and(&self.front, &other.front),
            back: and(&self.back, &other.back),
        }
    }
}
