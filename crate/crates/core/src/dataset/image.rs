use std::fs;
use std::io::BufWriter;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder};

use crate::error::{Error, Result};

/// Normalized line height in pixels.
pub const LINE_HEIGHT: usize = 48;
/// Horizontal subsampling factor between pixels and encoder positions.
pub const PATCH_WIDTH: usize = 8;

/// Single-channel text-line image, row-major, values in `[0,1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LineImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl LineImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::Dimension(format!(
                "image {height}×{width} with {} values",
                data.len()
            )));
        }
        Ok(LineImage { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        LineImage {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    /// Number of stride-8 patch positions, `floor(width / 8)`.
    pub fn patch_count(&self) -> usize {
        self.width / PATCH_WIDTH
    }

    /// Columns `[x0, x1)` as a new image.
    pub fn crop_columns(&self, x0: usize, x1: usize) -> Result<LineImage> {
        if x0 >= x1 || x1 > self.width {
            return Err(Error::Dimension(format!(
                "column range {x0}..{x1} outside width {}",
                self.width
            )));
        }
        let w = x1 - x0;
        let mut data = Vec::with_capacity(self.height * w);
        for row in self.data.chunks(self.width) {
            data.extend_from_slice(&row[x0..x1]);
        }
        LineImage::new(self.height, w, data)
    }

    /// Rounds every value to the nearest 8-bit level, so that the image equals
    /// what a PGM round trip produces.
    pub fn quantized(&self) -> LineImage {
        LineImage {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .map(|&v| f32::from(to_u8(v)) / 255.0)
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|&v| to_u8(v)).collect()
    }

    pub fn from_bytes(height: usize, width: usize, bytes: &[u8]) -> Result<LineImage> {
        LineImage::new(height, width, bytes.iter().map(|&b| f32::from(b) / 255.0).collect())
    }

    /// Writes a binary (P5) PGM with maxval 255.
    pub fn save_pgm(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let encoder = PnmEncoder::new(BufWriter::new(file))
            .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary));
        encoder
            .write_image(
                &self.to_bytes(),
                self.width as u32,
                self.height as u32,
                ExtendedColorType::L8,
            )
            .map_err(|e| Error::io(path, std::io::Error::other(e)))
    }

    pub fn load_pgm(path: &Path) -> Result<LineImage> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Pnm)
            .map_err(|e| Error::io(path, std::io::Error::other(e)))?
            .to_luma8();
        LineImage::from_bytes(img.height() as usize, img.width() as usize, img.as_raw())
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Bilinear resize to `target` rows preserving aspect ratio; widths round to
/// the nearest integer and never drop below one patch.
pub fn normalize_height(image: &LineImage, target: usize) -> LineImage {
    if image.height == target {
        return image.clone();
    }
    let scale = target as f64 / image.height as f64;
    let new_w = ((image.width as f64 * scale).round() as usize).max(PATCH_WIDTH);
    resize_bilinear(image, target, new_w)
}

pub(crate) fn resize_bilinear(image: &LineImage, new_h: usize, new_w: usize) -> LineImage {
    let sy = image.height as f64 / new_h as f64;
    let sx = image.width as f64 / new_w as f64;
    let mut out = Vec::with_capacity(new_h * new_w);
    for y in 0..new_h {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (image.height - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(image.height - 1);
        let ty = (fy - y0 as f64) as f32;
        for x in 0..new_w {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (image.width - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(image.width - 1);
            let tx = (fx - x0 as f64) as f32;
            let top = image.get(x0, y0) * (1.0 - tx) + image.get(x1, y0) * tx;
            let bottom = image.get(x0, y1) * (1.0 - tx) + image.get(x1, y1) * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    LineImage {
        height: new_h,
        width: new_w,
        data: out,
    }
}
