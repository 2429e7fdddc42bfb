//! Baseline JPEG encoder. Coefficient-exact: `parse(encode(img)) == img`
//! on the coefficient planes and quantization tables.

use crate::error::JpegError;
use crate::freq::zigzag::zigzag_order;

use super::{typical_huffman_set, HuffmanCodes, HuffmanSet, JpegImage};

struct BitWriter {
    out: Vec<u8>,
    buf: u32,
    count: u32,
}

impl BitWriter {
    fn new(out: Vec<u8>) -> Self {
        BitWriter { out, buf: 0, count: 0 }
    }

    fn put_bits(&mut self, value: u32, n: u8) {
        for i in (0..n).rev() {
            self.buf = (self.buf << 1) | ((value >> i) & 1);
            self.count += 1;
            if self.count == 8 {
                let b = self.buf as u8;
                self.out.push(b);
                if b == 0xFF {
                    self.out.push(0x00);
                }
                self.buf = 0;
                self.count = 0;
            }
        }
    }

    /// Pads the final partial byte with 1-bits.
    fn flush(&mut self) {
        while self.count != 0 {
            self.put_bits(1, 1);
        }
    }
}

fn magnitude_category(v: i32) -> u8 {
    let mut a = v.unsigned_abs();
    let mut s = 0u8;
    while a != 0 {
        a >>= 1;
        s += 1;
    }
    s
}

fn put_coefficient(w: &mut BitWriter, v: i32, size: u8) {
    if size == 0 {
        return;
    }
    let bits = if v >= 0 { v as u32 } else { (v - 1) as u32 & ((1u32 << size) - 1) };
    w.put_bits(bits, size);
}

/// Returns true when every (run,size) symbol needed by the planes exists in
/// the given tables.
fn tables_cover(img: &JpegImage, set: &HuffmanSet) -> bool {
    let codes: Vec<(HuffmanCodes, HuffmanCodes)> = [
        (&set.dc_luma, &set.ac_luma),
        (&set.dc_chroma, &set.ac_chroma),
    ]
    .iter()
    .map(|(dc, ac)| (dc.build_codes(), ac.build_codes()))
    .collect();
    let zig = zigzag_order();
    let n_blocks = img.blocks_w() * img.blocks_h();
    for (ci, plane) in img.planes.iter().enumerate() {
        let (dc, ac) = &codes[if ci == 0 { 0 } else { 1 }];
        let mut pred = 0i32;
        for b in 0..n_blocks {
            let block = &plane.coeffs[b * 64..(b + 1) * 64];
            let diff = block[0] - pred;
            pred = block[0];
            if !dc.have[magnitude_category(diff) as usize] {
                return false;
            }
            let mut run = 0u32;
            for k in 1..64 {
                let v = block[zig.natural_index(k)];
                if v == 0 {
                    run += 1;
                    continue;
                }
                while run > 15 {
                    if !ac.have[0xF0] {
                        return false;
                    }
                    run -= 16;
                }
                let rs = ((run as u8) << 4) | magnitude_category(v);
                if !ac.have[rs as usize] {
                    return false;
                }
                run = 0;
            }
            if run > 0 && !ac.have[0x00] {
                return false;
            }
        }
    }
    true
}

/// Serializes a [`JpegImage`] as a baseline JFIF stream.
///
/// Entropy tables: the tables the image was parsed with, when present and
/// able to encode every symbol the (possibly modified) planes need;
/// otherwise the T.81 typical tables.
pub fn encode(img: &JpegImage) -> Result<Vec<u8>, JpegError> {
    validate(img)?;
    let typical;
    let set = match &img.huffman {
        Some(set) if tables_cover(img, set) => set,
        _ => {
            typical = typical_huffman_set();
            &typical
        }
    };

    let mut out = Vec::with_capacity(1024 + img.width * img.height);
    out.extend_from_slice(&[0xFF, 0xD8]); // SOI
    // APP0 / JFIF 1.1, no thumbnail
    out.extend_from_slice(&[0xFF, 0xE0, 0x00, 0x10]);
    out.extend_from_slice(b"JFIF\0");
    out.extend_from_slice(&[0x01, 0x01, 0x00, 0x00, 0x01, 0x00, 0x01, 0x00, 0x00]);

    for (i, q) in img.quant_tables.iter().enumerate() {
        let zz = q.zigzag_values();
        let wide = zz.iter().any(|&v| v > 255);
        let entry_len = if wide { 2 } else { 1 };
        let len = 2 + 1 + 64 * entry_len;
        out.extend_from_slice(&[0xFF, 0xDB]);
        out.extend_from_slice(&(len as u16).to_be_bytes());
        out.push(((wide as u8) << 4) | i as u8);
        for v in zz {
            if wide {
                out.extend_from_slice(&v.to_be_bytes());
            } else {
                out.push(v as u8);
            }
        }
    }

    // SOF0: 8-bit, three 1x1-sampled components
    out.extend_from_slice(&[0xFF, 0xC0]);
    out.extend_from_slice(&(8u16 + 9).to_be_bytes());
    out.push(8);
    out.extend_from_slice(&(img.height as u16).to_be_bytes());
    out.extend_from_slice(&(img.width as u16).to_be_bytes());
    out.push(3);
    for (ci, plane) in img.planes.iter().enumerate() {
        out.push(ci as u8 + 1);
        out.push(0x11);
        out.push(plane.quant_table_id);
    }

    for (table, class, id) in [
        (&set.dc_luma, 0u8, 0u8),
        (&set.ac_luma, 1, 0),
        (&set.dc_chroma, 0, 1),
        (&set.ac_chroma, 1, 1),
    ] {
        let len = 2 + 1 + 16 + table.symbols.len();
        out.extend_from_slice(&[0xFF, 0xC4]);
        out.extend_from_slice(&(len as u16).to_be_bytes());
        out.push((class << 4) | id);
        out.extend_from_slice(&table.counts);
        out.extend_from_slice(&table.symbols);
    }

    // SOS
    out.extend_from_slice(&[0xFF, 0xDA, 0x00, 0x0C, 0x03]);
    out.extend_from_slice(&[1, 0x00, 2, 0x11, 3, 0x11]);
    out.extend_from_slice(&[0, 63, 0]);

    let dc_codes = [set.dc_luma.build_codes(), set.dc_chroma.build_codes()];
    let ac_codes = [set.ac_luma.build_codes(), set.ac_chroma.build_codes()];
    let zig = zigzag_order();
    let n_blocks = img.blocks_w() * img.blocks_h();
    let mut w = BitWriter::new(out);
    let mut pred = [0i32; 3];
    for b in 0..n_blocks {
        for (ci, plane) in img.planes.iter().enumerate() {
            let t = if ci == 0 { 0 } else { 1 };
            let block = &plane.coeffs[b * 64..(b + 1) * 64];
            let diff = block[0] - pred[ci];
            pred[ci] = block[0];
            let s = magnitude_category(diff);
            let (code, len) = dc_codes[t].code_of[s as usize];
            w.put_bits(code, len);
            put_coefficient(&mut w, diff, s);

            let mut run = 0u8;
            for k in 1..64 {
                let v = block[zig.natural_index(k)];
                if v == 0 {
                    run += 1;
                    continue;
                }
                while run > 15 {
                    let (code, len) = ac_codes[t].code_of[0xF0];
                    w.put_bits(code, len);
                    run -= 16;
                }
                let s = magnitude_category(v);
                let (code, len) = ac_codes[t].code_of[((run << 4) | s) as usize];
                w.put_bits(code, len);
                put_coefficient(&mut w, v, s);
                run = 0;
            }
            if run > 0 {
                let (code, len) = ac_codes[t].code_of[0x00];
                w.put_bits(code, len);
            }
        }
    }
    w.flush();
    let mut out = w.out;
    out.extend_from_slice(&[0xFF, 0xD9]); // EOI
    Ok(out)
}

fn validate(img: &JpegImage) -> Result<(), JpegError> {
    if img.width == 0 || img.height == 0 || img.width % 8 != 0 || img.height % 8 != 0 {
        return Err(JpegError::DimensionsNotMultipleOf8(img.width as u16, img.height as u16));
    }
    if img.width > u16::MAX as usize || img.height > u16::MAX as usize {
        return Err(JpegError::Malformed("dimensions exceed 16 bits".into()));
    }
    let n = img.blocks_w() * img.blocks_h() * 64;
    for (ci, plane) in img.planes.iter().enumerate() {
        if plane.coeffs.len() != n {
            return Err(JpegError::Malformed(format!(
                "plane {ci} has {} coefficients, geometry implies {n}",
                plane.coeffs.len()
            )));
        }
        if plane.quant_table_id as usize >= img.quant_tables.len() {
            return Err(JpegError::MissingQuantTable(plane.quant_table_id));
        }
        let mut pred = 0i32;
        for b in 0..n / 64 {
            let block = &plane.coeffs[b * 64..(b + 1) * 64];
            let diff = block[0] - pred;
            pred = block[0];
            if diff.abs() > 2047 || block[0].abs() > 2047 {
                return Err(JpegError::CoefficientOutOfRange {
                    plane: ci,
                    index: b * 64,
                    value: block[0],
                });
            }
            for (k, &v) in block.iter().enumerate().skip(1) {
                if v.abs() > 1023 {
                    return Err(JpegError::CoefficientOutOfRange {
                        plane: ci,
                        index: b * 64 + k,
                        value: v,
                    });
                }
            }
        }
    }
    Ok(())
}
