//! PNG output: images, slot overlays and side-by-side panels.
//!
//! Slot `k` is always drawn in `SLOT_PALETTE[k % len]`, so overlays from
//! different checkpoints can be compared directly.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{shape_err, Result};
use crate::metrics::SegMasks;

pub const SLOT_PALETTE: [[u8; 3]; 10] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
];

pub fn slot_color(k: usize) -> [u8; 3] {
    SLOT_PALETTE[k % SLOT_PALETTE.len()]
}

fn to_u8(v: f32) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 0.5) * 255.0).round() as u8
}

/// `(H, W, 3)` row-major values in `[-1, 1]` to an RGB image.
pub fn to_rgb(data: &[f32], height: usize, width: usize) -> Result<RgbImage> {
    if data.len() != height * width * 3 {
        return shape_err(format!("{} values for a {height}×{width} RGB image", data.len()));
    }
    Ok(RgbImage::from_fn(width as u32, height as u32, |x, y| {
        let i = (y as usize * width + x as usize) * 3;
        Rgb([to_u8(data[i]), to_u8(data[i + 1]), to_u8(data[i + 2])])
    }))
}

/// Blend each pixel with the color of the slot that owns its grid cell.
pub fn overlay(image: &RgbImage, masks: &SegMasks, alpha: f32) -> RgbImage {
    let (w, h) = image.dimensions();
    let (gh, gw) = masks.grid;
    RgbImage::from_fn(w, h, |x, y| {
        let cell = (y as usize * gh / h as usize) * gw + x as usize * gw / w as usize;
        let c = slot_color(masks.labels[cell] as usize);
        let p = image.get_pixel(x, y).0;
        Rgb([0, 1, 2].map(|k| ((1.0 - alpha) * p[k] as f32 + alpha * c[k] as f32).round() as u8))
    })
}

/// Solid slot-colored segmentation at image resolution.
pub fn segmentation(masks: &SegMasks, height: u32, width: u32) -> RgbImage {
    let (gh, gw) = masks.grid;
    RgbImage::from_fn(width, height, |x, y| {
        Rgb(slot_color(masks.labels[(y as usize * gh / height as usize) * gw + x as usize * gw / width as usize] as usize))
    })
}

/// Images left to right with a white gutter, each upscaled by `scale`.
pub fn panel(images: &[RgbImage], scale: u32, gutter: u32) -> RgbImage {
    let h = images.iter().map(|i| i.height()).max().unwrap_or(0) * scale;
    let w: u32 = images.iter().map(|i| i.width() * scale).sum::<u32>() + gutter * images.len().saturating_sub(1) as u32;
    let mut out = RgbImage::from_pixel(w.max(1), h.max(1), Rgb([255, 255, 255]));
    let mut x0 = 0;
    for img in images {
        for y in 0..img.height() * scale {
            for x in 0..img.width() * scale {
                out.put_pixel(x0 + x, y, *img.get_pixel(x / scale, y / scale));
            }
        }
        x0 += img.width() * scale + gutter;
    }
    out
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}
