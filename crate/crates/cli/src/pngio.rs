//! PNG import/export for adversarial images, heatmaps, and feature montages.

use std::path::Path;

use anyhow::{bail, Context, Result};
use image::{GrayImage, RgbImage};
use ndarray::{Array2, Array3, Array4};

use fia_core::image::ImageBatch;

/// Writes one image of a batch (values already on the integer grid) as an
/// 8-bit PNG. Channel count must be 3 (RGB) or 1 (grayscale).
pub fn write_image_png(batch: &ImageBatch<f32>, index: usize, path: &Path) -> Result<()> {
    let (c, h, w) = batch.image_shape();
    let data = batch.data();
    match c {
        3 => {
            let mut img = RgbImage::new(w as u32, h as u32);
            for y in 0..h {
                for x in 0..w {
                    let px = [
                        data[[index, 0, y, x]].round().clamp(0.0, 255.0) as u8,
                        data[[index, 1, y, x]].round().clamp(0.0, 255.0) as u8,
                        data[[index, 2, y, x]].round().clamp(0.0, 255.0) as u8,
                    ];
                    img.put_pixel(x as u32, y as u32, image::Rgb(px));
                }
            }
            img.save(path)
                .with_context(|| format!("writing {}", path.display()))?;
        }
        1 => {
            let mut img = GrayImage::new(w as u32, h as u32);
            for y in 0..h {
                for x in 0..w {
                    let v = data[[index, 0, y, x]].round().clamp(0.0, 255.0) as u8;
                    img.put_pixel(x as u32, y as u32, image::Luma([v]));
                }
            }
            img.save(path)
                .with_context(|| format!("writing {}", path.display()))?;
        }
        other => bail!("unsupported channel count {other}"),
    }
    Ok(())
}

/// Reads an adversarial PNG back as raw u8 pixels in `(c, h, w)` C order.
pub fn read_image_png(path: &Path, expect: (usize, usize, usize)) -> Result<Vec<u8>> {
    let (c, h, w) = expect;
    let img = image::open(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = vec![0u8; c * h * w];
    match c {
        3 => {
            let rgb = img.to_rgb8();
            if (rgb.width() as usize, rgb.height() as usize) != (w, h) {
                bail!(
                    "{}: expected {w}x{h}, got {}x{}",
                    path.display(),
                    rgb.width(),
                    rgb.height()
                );
            }
            for y in 0..h {
                for x in 0..w {
                    let px = rgb.get_pixel(x as u32, y as u32);
                    for ch in 0..3 {
                        out[ch * h * w + y * w + x] = px[ch];
                    }
                }
            }
        }
        1 => {
            let gray = img.to_luma8();
            if (gray.width() as usize, gray.height() as usize) != (w, h) {
                bail!("{}: wrong dimensions", path.display());
            }
            for y in 0..h {
                for x in 0..w {
                    out[y * w + x] = gray.get_pixel(x as u32, y as u32)[0];
                }
            }
        }
        other => bail!("unsupported channel count {other}"),
    }
    Ok(out)
}

/// Writes a `[0, 1]` heatmap as 8-bit grayscale, nearest-upscaled so the
/// short side is at least 64 px.
pub fn write_heatmap_png(map: &Array2<f32>, path: &Path) -> Result<()> {
    let (h, w) = map.dim();
    let scale = (64 / h.min(w).max(1)).max(1);
    let (oh, ow) = (h * scale, w * scale);
    let mut img = GrayImage::new(ow as u32, oh as u32);
    for y in 0..oh {
        for x in 0..ow {
            let v = map[[y / scale, x / scale]].clamp(0.0, 1.0);
            img.put_pixel(x as u32, y as u32, image::Luma([(v * 255.0).round() as u8]));
        }
    }
    img.save(path)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Tiles the channels of a feature map into a grid image, each tile min-max
/// normalized, nearest-upscaled 4x with 1-px separators.
pub fn write_montage_png(features: &Array3<f32>, path: &Path) -> Result<()> {
    let (c, h, w) = features.dim();
    let cols = (c as f64).sqrt().ceil() as usize;
    let rows = c.div_ceil(cols);
    let scale = 4usize;
    let (tile_h, tile_w) = (h * scale, w * scale);
    let (oh, ow) = (rows * (tile_h + 1) + 1, cols * (tile_w + 1) + 1);
    let mut img = GrayImage::from_pixel(ow as u32, oh as u32, image::Luma([32]));
    for ch in 0..c {
        let (row, col) = (ch / cols, ch % cols);
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for y in 0..h {
            for x in 0..w {
                lo = lo.min(features[[ch, y, x]]);
                hi = hi.max(features[[ch, y, x]]);
            }
        }
        let span = if hi > lo { hi - lo } else { 1.0 };
        let (oy, ox) = (1 + row * (tile_h + 1), 1 + col * (tile_w + 1));
        for y in 0..tile_h {
            for x in 0..tile_w {
                let v = (features[[ch, y / scale, x / scale]] - lo) / span;
                img.put_pixel(
                    (ox + x) as u32,
                    (oy + y) as u32,
                    image::Luma([(v * 255.0).round() as u8]),
                );
            }
        }
    }
    img.save(path)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Stacks raw u8 images into one batch.
pub fn batch_from_many(images: &[Vec<u8>], shape: (usize, usize, usize)) -> Result<ImageBatch<f32>> {
    let (c, h, w) = shape;
    let mut data = Array4::zeros((images.len(), c, h, w));
    for (i, bytes) in images.iter().enumerate() {
        if bytes.len() != c * h * w {
            bail!("image {i}: wrong byte count");
        }
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    data[[i, ch, y, x]] = bytes[ch * h * w + y * w + x] as f32;
                }
            }
        }
    }
    Ok(ImageBatch::new_default_range(data)?)
}
