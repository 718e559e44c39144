//! Image preprocessing chain: histogram equalization, bilinear resize,
//! normalization to [0, 1]. Applied in that order.

use crate::data::GrayImage;
use crate::error::{Error, Result};

/// Side length of the square network input.
pub const TARGET_SIZE: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct PixelMatrix {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

/// Global histogram equalization.
///
/// Each intensity `v` maps to `round(255 * (cdf(v) - cdf_min) / (N - cdf_min))`
/// using exact integer arithmetic with ties to even. An image with a single
/// intensity is returned unchanged.
pub fn equalize_histogram(img: &GrayImage) -> GrayImage {
    let mut hist = [0u64; 256];
    for &p in img.pixels() {
        hist[p as usize] += 1;
    }
    let n = img.pixels().len() as u64;
    let mut cdf = [0u64; 256];
    let mut acc = 0;
    for (c, h) in cdf.iter_mut().zip(hist) {
        acc += h;
        *c = acc;
    }
    let cdf_min = cdf.iter().copied().find(|&c| c > 0).unwrap_or(0);
    let denom = n - cdf_min;
    if denom == 0 {
        return img.clone();
    }
    let lut: Vec<u8> = cdf
        .iter()
        .map(|&c| {
            let num = 255 * c.saturating_sub(cdf_min);
            let (q, r) = (num / denom, num % denom);
            let up = 2 * r > denom || (2 * r == denom && q % 2 == 1);
            (q + u64::from(up)) as u8
        })
        .collect();
    let pixels = img.pixels().iter().map(|&p| lut[p as usize]).collect();
    GrayImage::new(img.width(), img.height(), pixels).expect("dimensions unchanged")
}

/// Source coordinate for a destination index under the half-pixel-center
/// convention, clamped to the source extent.
fn source_coord(dst: usize, src_len: usize, dst_len: usize) -> f64 {
    let s = (dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5;
    s.clamp(0.0, (src_len - 1) as f64)
}

pub fn resize_bilinear(img: &GrayImage, out_w: usize, out_h: usize) -> Result<GrayImage> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::argument("output dimensions must be at least 1"));
    }
    let (w, h) = (img.width(), img.height());
    let xs: Vec<(usize, usize, f64)> = (0..out_w)
        .map(|dx| {
            let sx = source_coord(dx, w, out_w);
            let x0 = sx.floor() as usize;
            (x0, (x0 + 1).min(w - 1), sx - x0 as f64)
        })
        .collect();
    let mut pixels = Vec::with_capacity(out_w * out_h);
    for dy in 0..out_h {
        let sy = source_coord(dy, h, out_h);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f64;
        for &(x0, x1, fx) in &xs {
            let top = img.get(x0, y0) as f64 * (1.0 - fx) + img.get(x1, y0) as f64 * fx;
            let bottom = img.get(x0, y1) as f64 * (1.0 - fx) + img.get(x1, y1) as f64 * fx;
            let v = top * (1.0 - fy) + bottom * fy;
            pixels.push(v.round_ties_even().clamp(0.0, 255.0) as u8);
        }
    }
    GrayImage::new(out_w, out_h, pixels)
}

pub fn normalize(img: &GrayImage) -> PixelMatrix {
    PixelMatrix {
        width: img.width(),
        height: img.height(),
        values: img.pixels().iter().map(|&p| p as f64 / 255.0).collect(),
    }
}

/// Equalize then resize; the 8-bit result is what gets written to disk.
pub fn prepare(img: &GrayImage, size: usize) -> Result<GrayImage> {
    resize_bilinear(&equalize_histogram(img), size, size)
}

/// Full chain ending in the normalized matrix fed to a network.
pub fn preprocess(img: &GrayImage, size: usize) -> Result<PixelMatrix> {
    prepare(img, size).map(|g| normalize(&g))
}
