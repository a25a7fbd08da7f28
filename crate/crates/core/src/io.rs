//! Lossless PNG storage for tensors.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};
use crate::tensor::{Image, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

impl BitDepth {
    fn max_value(self) -> f64 {
        match self {
            BitDepth::Eight => 255.0,
            BitDepth::Sixteen => 65535.0,
        }
    }
}

/// Rounds every intensity onto the grid representable at `depth`.
pub fn quantize(t: &Tensor, depth: BitDepth) -> Tensor {
    let m = depth.max_value();
    t.map(|v| (v.clamp(0.0, 1.0) * m).round() / m)
}

/// Writes a 1- or 3-channel tensor with values in `[0, 1]` as PNG.
pub fn save_png(t: &Tensor, path: &Path, depth: BitDepth) -> Result<()> {
    let (c, h, w) = t.shape();
    let m = depth.max_value();
    let level = |ci: usize, y: usize, x: usize| (t.get(ci, y, x).clamp(0.0, 1.0) * m).round();
    let (w32, h32) = (w as u32, h as u32);
    let dynimg = match (c, depth) {
        (1, BitDepth::Eight) => DynamicImage::ImageLuma8(ImageBuffer::from_fn(w32, h32, |x, y| {
            Luma([level(0, y as usize, x as usize) as u8])
        })),
        (1, BitDepth::Sixteen) => {
            DynamicImage::ImageLuma16(ImageBuffer::from_fn(w32, h32, |x, y| {
                Luma([level(0, y as usize, x as usize) as u16])
            }))
        }
        (3, BitDepth::Eight) => DynamicImage::ImageRgb8(ImageBuffer::from_fn(w32, h32, |x, y| {
            let (x, y) = (x as usize, y as usize);
            Rgb([level(0, y, x) as u8, level(1, y, x) as u8, level(2, y, x) as u8])
        })),
        (3, BitDepth::Sixteen) => {
            DynamicImage::ImageRgb16(ImageBuffer::from_fn(w32, h32, |x, y| {
                let (x, y) = (x as usize, y as usize);
                Rgb([
                    level(0, y, x) as u16,
                    level(1, y, x) as u16,
                    level(2, y, x) as u16,
                ])
            }))
        }
        _ => {
            return Err(Error::Shape(format!(
                "cannot store {c}-channel tensor as PNG"
            )))
        }
    };
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    dynimg.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads an 8- or 16-bit RGB PNG into an [`Image`].
pub fn load_png(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let tensor = match img {
        DynamicImage::ImageRgb16(buf) => {
            Tensor::from_fn(3, h, w, |c, y, x| {
                buf.get_pixel(x as u32, y as u32)[c] as f64 / 65535.0
            })
        }
        DynamicImage::ImageLuma16(buf) => Tensor::from_fn(1, h, w, |_, y, x| {
            buf.get_pixel(x as u32, y as u32)[0] as f64 / 65535.0
        }),
        DynamicImage::ImageLuma8(buf) => Tensor::from_fn(1, h, w, |_, y, x| {
            buf.get_pixel(x as u32, y as u32)[0] as f64 / 255.0
        }),
        other => {
            let buf = other.to_rgb8();
            Tensor::from_fn(3, h, w, |c, y, x| {
                buf.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
            })
        }
    };
    Image::new(tensor)
}
