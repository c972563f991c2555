//! Slide-scale source images: plain 8-bit RGB rasters with O(1) pixel access.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A source image crops are drawn from. Pixels are row-major RGB8.
#[derive(Debug, Clone)]
pub struct SlideImage {
    id: String,
    path: PathBuf,
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl SlideImage {
    /// Loads a slide from an image file; the id is the file stem.
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::image(path, e))?.to_rgb8();
        let (width, height) = (img.width() as usize, img.height() as usize);
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "slide".to_string());
        SlideImage::from_pixels(id, width, height, img.into_raw()).map(|mut s| {
            s.path = path.to_path_buf();
            s
        })
    }

    /// Builds a slide from raw RGB8 pixels (used for synthetic slides).
    pub fn from_pixels(
        id: impl Into<String>,
        width: usize,
        height: usize,
        data: Vec<u8>,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Geometry("slide dimensions must be positive".into()));
        }
        if data.len() != width * height * 3 {
            return Err(Error::Geometry(format!(
                "pixel buffer holds {} bytes, {}x{} RGB needs {}",
                data.len(),
                width,
                height,
                width * height * 3
            )));
        }
        Ok(SlideImage {
            id: id.into(),
            path: PathBuf::new(),
            width,
            height,
            data,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Copies the `side`×`side` square at `(x, y)` as packed RGB8.
    pub fn crop_rgb(&self, x: usize, y: usize, side: usize) -> Result<Vec<u8>> {
        if side == 0 || x + side > self.width || y + side > self.height {
            return Err(Error::Geometry(format!(
                "crop {side}x{side}@({x},{y}) exceeds slide {}x{}",
                self.width, self.height
            )));
        }
        let mut out = Vec::with_capacity(side * side * 3);
        for row in y..y + side {
            let start = (row * self.width + x) * 3;
            out.extend_from_slice(&self.data[start..start + side * 3]);
        }
        Ok(out)
    }

    /// Writes the slide as an 8-bit RGB PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let img = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.data.clone())
            .expect("buffer length is validated at construction");
        img.save(path).map_err(|e| Error::image(path, e))
    }
}

/// Loads an RGB image as an `[H, W, 3]` tensor scaled to `[0, 1]`.
pub fn load_rgb_tensor(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f32> = img.into_raw().iter().map(|&b| b as f32 / 255.0).collect();
    Tensor::new(data, vec![h, w, 3])
}

/// Writes an `[H, W, 3]` tensor with values in `[0, 1]` as an RGB PNG.
pub fn save_rgb_tensor(t: &Tensor, path: &Path) -> Result<()> {
    let shape = t.shape();
    if shape.len() != 3 || shape[2] != 3 {
        return Err(Error::Geometry(format!(
            "expected [H, W, 3] tensor, got {shape:?}"
        )));
    }
    let (h, w) = (shape[0], shape[1]);
    let data: Vec<u8> = t
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = image::RgbImage::from_raw(w as u32, h as u32, data)
        .expect("length matches validated shape");
    img.save(path).map_err(|e| Error::image(path, e))
}
