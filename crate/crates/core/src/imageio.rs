//! PNG loading and export.

use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, GrayImage, ImageFormat, Luma};

use crate::error::{FlimError, Result};
use crate::tensor::ImageTensor;

const PNG_MAGIC: [u8; 8] = [0x89, b'P', b'N', b'G', 0x0d, 0x0a, 0x1a, 0x0a];

pub fn is_png(bytes: &[u8]) -> bool {
    bytes.starts_with(&PNG_MAGIC)
}

/// Decodes an 8-bit PNG into a tensor with values in `[0, 1]`.
///
/// Grayscale images yield one channel, colour images three. Alpha is dropped.
pub fn decode_png(bytes: &[u8]) -> std::result::Result<ImageTensor, String> {
    if !is_png(bytes) {
        return Err("not a PNG stream".into());
    }
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(|e| e.to_string())?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (channels, raw): (usize, Vec<u8>) = match img {
        DynamicImage::ImageLuma8(g) => (1, g.into_raw()),
        DynamicImage::ImageLumaA8(_) | DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA16(_) => {
            (1, img.to_luma8().into_raw())
        }
        other => (3, other.to_rgb8().into_raw()),
    };
    let data = raw.into_iter().map(|v| v as f32 / 255.0).collect();
    ImageTensor::new(h, w, channels, data).map_err(|e| e.to_string())
}

pub fn load_png(path: &Path) -> Result<ImageTensor> {
    let bytes = std::fs::read(path).map_err(|e| FlimError::io(path, e))?;
    decode_png(&bytes).map_err(|message| FlimError::Image {
        path: path.to_path_buf(),
        message,
    })
}

/// Width and height read from the PNG header without decoding pixels.
pub fn png_dimensions(path: &Path) -> Result<(u32, u32)> {
    image::image_dimensions(path).map_err(|e| FlimError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes a `[0, 1]` plane as 8-bit grayscale PNG bytes (`round(255 v)`).
pub fn encode_gray_png(height: usize, width: usize, plane: &[f32]) -> Vec<u8> {
    assert_eq!(plane.len(), height * width);
    let img = GrayImage::from_fn(width as u32, height as u32, |x, y| {
        Luma([to_u8(plane[y as usize * width + x as usize])])
    });
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)
        .expect("PNG encoding to memory cannot fail");
    buf.into_inner()
}

/// Encodes a 1- or 3-channel `[0, 1]` tensor as PNG bytes.
pub fn encode_png(image: &ImageTensor) -> Result<Vec<u8>> {
    let (h, w) = (image.height(), image.width());
    match image.channels() {
        1 => Ok(encode_gray_png(h, w, image.data())),
        3 => {
            let raw: Vec<u8> = image.data().iter().map(|&v| to_u8(v)).collect();
            let img = image::RgbImage::from_raw(w as u32, h as u32, raw)
                .expect("buffer length matches dimensions");
            let mut buf = Cursor::new(Vec::new());
            img.write_to(&mut buf, ImageFormat::Png)
                .expect("PNG encoding to memory cannot fail");
            Ok(buf.into_inner())
        }
        c => Err(FlimError::domain(format!(
            "cannot encode a {c}-channel tensor as PNG"
        ))),
    }
}

pub fn save_png(image: &ImageTensor, path: &Path) -> Result<()> {
    let bytes = encode_png(image)?;
    std::fs::write(path, bytes).map_err(|e| FlimError::io(path, e))
}

/// Downscales a `[0, 1]` plane so its longer side is at most `max_side`
/// (area averaging) and encodes it as grayscale PNG.
pub fn thumbnail_png(height: usize, width: usize, plane: &[f32], max_side: usize) -> Vec<u8> {
    let longest = height.max(width);
    if longest <= max_side {
        return encode_gray_png(height, width, plane);
    }
    let scale = max_side as f64 / longest as f64;
    let th = ((height as f64 * scale).round() as usize).max(1);
    let tw = ((width as f64 * scale).round() as usize).max(1);
    let mut out = vec![0f32; th * tw];
    for ty in 0..th {
        let y0 = ty * height / th;
        let y1 = ((ty + 1) * height / th).max(y0 + 1);
        for tx in 0..tw {
            let x0 = tx * width / tw;
            let x1 = ((tx + 1) * width / tw).max(x0 + 1);
            let mut acc = 0f64;
            for y in y0..y1 {
                for x in x0..x1 {
                    acc += plane[y * width + x] as f64;
                }
            }
            out[ty * tw + tx] = (acc / ((y1 - y0) * (x1 - x0)) as f64) as f32;
        }
    }
    encode_gray_png(th, tw, &out)
}
