//! Pixel-domain decode (and a synthesis helper for building covers).

use crate::error::{JpegError, PipelineError};
use crate::freq::dct8;
use crate::image8::Rgb8Image;
use crate::scalar::round_half_away;

use super::{quant_tables_for_quality, ComponentPlane, JpegImage};

/// Full-range BT.601: YCbCr (0..255, chroma centered at 128) to RGB.
/// Rounds half away from zero and clamps to 0..=255.
pub fn ycbcr_to_rgb(y: f64, cb: f64, cr: f64) -> [u8; 3] {
    let r = y + 1.402 * (cr - 128.0);
    let g = y - 0.344136 * (cb - 128.0) - 0.714136 * (cr - 128.0);
    let b = y + 1.772 * (cb - 128.0);
    [clamp_u8(r), clamp_u8(g), clamp_u8(b)]
}

/// Full-range BT.601: RGB to YCbCr (unrounded).
pub fn rgb_to_ycbcr(r: u8, g: u8, b: u8) -> [f64; 3] {
    let (r, g, b) = (r as f64, g as f64, b as f64);
    let y = 0.299 * r + 0.587 * g + 0.114 * b;
    let cb = 128.0 - 0.168736 * r - 0.331264 * g + 0.5 * b;
    let cr = 128.0 + 0.5 * r - 0.418688 * g - 0.081312 * b;
    [y, cb, cr]
}

fn clamp_u8(v: f64) -> u8 {
    round_half_away(v).clamp(0.0, 255.0) as u8
}

/// Dequantizes, applies the inverse block DCT, level-shifts by +128 and
/// converts to RGB.
pub fn decode_pixels(img: &JpegImage) -> Rgb8Image {
    let (w, h) = (img.width, img.height);
    let mut ycc = vec![[0.0f64; 3]; w * h];
    for (ci, plane) in img.planes.iter().enumerate() {
        let q = img.quant_for(ci);
        for by in 0..img.blocks_h() {
            for bx in 0..img.blocks_w() {
                let base = (by * img.blocks_w() + bx) * 64;
                let mut block = [[0.0f64; 8]; 8];
                for (u, row) in block.iter_mut().enumerate() {
                    for (v, val) in row.iter_mut().enumerate() {
                        let k = u * 8 + v;
                        *val = plane.coeffs[base + k] as f64 * q.value(k) as f64;
                    }
                }
                let px = dct8::inverse(&block);
                for (u, row) in px.iter().enumerate() {
                    for (v, val) in row.iter().enumerate() {
                        ycc[(by * 8 + u) * w + bx * 8 + v][ci] = val + 128.0;
                    }
                }
            }
        }
    }
    let mut data = Vec::with_capacity(w * h * 3);
    for p in &ycc {
        data.extend_from_slice(&ycbcr_to_rgb(p[0], p[1], p[2]));
    }
    Rgb8Image::new(w, h, data).expect("geometry is consistent")
}

/// Compresses an RGB image to quantized coefficient planes at the given
/// quality factor. Convenience for building synthetic covers; uses the same
/// color transform, block DCT and rounding as the decoder.
pub fn compress_rgb(img: &Rgb8Image, quality: u32) -> Result<JpegImage, PipelineError> {
    let (w, h) = (img.width(), img.height());
    if w % 8 != 0 || h % 8 != 0 || w == 0 || h == 0 {
        return Err(JpegError::DimensionsNotMultipleOf8(w as u16, h as u16).into());
    }
    let (luma, chroma) = quant_tables_for_quality(quality)?;
    let mut ycc = vec![[0.0f64; 3]; w * h];
    for y in 0..h {
        for x in 0..w {
            let [r, g, b] = img.pixel(x, y);
            ycc[y * w + x] = rgb_to_ycbcr(r, g, b);
        }
    }
    let quant_tables = vec![luma, chroma];
    let mut planes = Vec::with_capacity(3);
    for ci in 0..3 {
        let q = &quant_tables[if ci == 0 { 0 } else { 1 }];
        let mut coeffs = vec![0i32; (w / 8) * (h / 8) * 64];
        for by in 0..h / 8 {
            for bx in 0..w / 8 {
                let mut block = [[0.0f64; 8]; 8];
                for (u, row) in block.iter_mut().enumerate() {
                    for (v, val) in row.iter_mut().enumerate() {
                        *val = ycc[(by * 8 + u) * w + bx * 8 + v][ci] - 128.0;
                    }
                }
                let f = dct8::forward(&block);
                let base = (by * (w / 8) + bx) * 64;
                for (u, row) in f.iter().enumerate() {
                    for (v, &val) in row.iter().enumerate() {
                        let k = u * 8 + v;
                        let qv = round_half_away(val / q.value(k) as f64);
                        coeffs[base + k] = qv.clamp(-1023.0, 1023.0) as i32;
                    }
                }
            }
        }
        planes.push(ComponentPlane { quant_table_id: if ci == 0 { 0 } else { 1 }, coeffs });
    }
    let planes: [ComponentPlane; 3] = planes.try_into().unwrap();
    Ok(JpegImage { width: w, height: h, planes, quant_tables, huffman: None })
}
