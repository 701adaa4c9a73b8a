use std::path::Path;

use anyhow::{Context, Result};
use fcss::{Real, Tensor};

/// Load an 8-bit PNG or PNM image as a 3-channel tensor in [0, 1].
pub fn load_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .with_context(|| format!("cannot read image {}", path.display()))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let raw = img.into_raw();
    Ok(Tensor::from_fn(3, h, w, |c, y, x| raw[(y * w + x) * 3 + c] as Real / 255.0))
}

fn to_byte(v: Real) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Save a 1- or 3-channel tensor with values in [0, 1] as PNG.
pub fn save_image(path: &Path, t: &Tensor) -> Result<()> {
    let (c, h, w) = t.shape();
    let mut buf = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for k in 0..3 {
                buf.push(to_byte(t.at(k.min(c - 1), y, x)));
            }
        }
    }
    save_rgb(path, w, h, buf)
}

pub fn save_rgb(path: &Path, width: usize, height: usize, rgb: Vec<u8>) -> Result<()> {
    let img = image::RgbImage::from_raw(width as u32, height as u32, rgb).context("rgb buffer size")?;
    img.save(path)
        .with_context(|| format!("cannot write image {}", path.display()))
}
