//! Bit-exact baseline JPEG codec (ITU T.81 sequential, 8-bit, 4:4:4).
//!
//! The parser exposes the quantized DCT coefficients exactly as encoded;
//! the encoder writes them back so that `parse(encode(img))` reproduces
//! every coefficient. Anything outside the supported stream class is
//! rejected with a specific error, never silently resampled.

mod decode;
mod encode;
mod pixels;

pub use decode::parse;
pub use encode::encode;
pub use pixels::{compress_rgb, decode_pixels, rgb_to_ycbcr, ycbcr_to_rgb};

use crate::error::JpegError;
use crate::freq::zigzag::zigzag_order;

/// One quantization table, stored in natural (row-major) frequency order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantTable {
    values: [u16; 64],
}

impl QuantTable {
    pub fn new(values: [u16; 64]) -> Result<Self, JpegError> {
        if values.iter().any(|&v| v == 0) {
            return Err(JpegError::Malformed("quantization entry 0".into()));
        }
        Ok(QuantTable { values })
    }

    /// Entry at natural index (row*8 + col).
    pub fn value(&self, natural_index: usize) -> u16 {
        self.values[natural_index]
    }

    pub fn values(&self) -> &[u16; 64] {
        &self.values
    }

    /// Entries in the zigzag order used on the wire.
    pub fn zigzag_values(&self) -> [u16; 64] {
        let z = zigzag_order();
        let mut out = [0u16; 64];
        for (rank, slot) in out.iter_mut().enumerate() {
            *slot = self.values[z.natural_index(rank)];
        }
        out
    }

    pub fn from_zigzag(zz: &[u16; 64]) -> Result<Self, JpegError> {
        let z = zigzag_order();
        let mut values = [0u16; 64];
        for (rank, &v) in zz.iter().enumerate() {
            values[z.natural_index(rank)] = v;
        }
        Self::new(values)
    }
}

/// Huffman table as transmitted in a DHT segment: number of codes per code
/// length 1..=16, then the symbol values in code order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HuffmanTable {
    pub counts: [u8; 16],
    pub symbols: Vec<u8>,
}

impl HuffmanTable {
    pub fn new(counts: [u8; 16], symbols: Vec<u8>) -> Result<Self, JpegError> {
        let total: usize = counts.iter().map(|&c| c as usize).sum();
        if total != symbols.len() || total > 256 {
            return Err(JpegError::Malformed(format!(
                "DHT declares {total} symbols, supplies {}",
                symbols.len()
            )));
        }
        // Kraft sum <= 1 guarantees the canonical code set is prefix-free.
        let mut kraft = 0u64;
        for (i, &c) in counts.iter().enumerate() {
            kraft += (c as u64) << (16 - (i + 1));
        }
        if kraft > 1 << 16 {
            return Err(JpegError::Malformed("Huffman code lengths overflow".into()));
        }
        Ok(HuffmanTable { counts, symbols })
    }

    /// Canonical code assignment: (code, length) for each symbol, plus the
    /// per-length first-code bounds used by the decoder.
    pub(crate) fn build_codes(&self) -> HuffmanCodes {
        let mut code = 0u32;
        let mut sym_index = 0usize;
        let mut min_code = [0u32; 17];
        let mut max_code = [-1i64; 17];
        let mut val_ptr = [0usize; 17];
        let mut code_of = vec![(0u32, 0u8); 256];
        let mut have = vec![false; 256];
        for len in 1..=16 {
            let n = self.counts[len - 1] as usize;
            min_code[len] = code;
            val_ptr[len] = sym_index;
            for _ in 0..n {
                let s = self.symbols[sym_index] as usize;
                code_of[s] = (code, len as u8);
                have[s] = true;
                code += 1;
                sym_index += 1;
            }
            max_code[len] = code as i64 - 1;
            code <<= 1;
        }
        HuffmanCodes { min_code, max_code, val_ptr, code_of, have, symbols: self.symbols.clone() }
    }
}

pub(crate) struct HuffmanCodes {
    pub min_code: [u32; 17],
    pub max_code: [i64; 17],
    pub val_ptr: [usize; 17],
    pub code_of: Vec<(u32, u8)>,
    pub have: Vec<bool>,
    pub symbols: Vec<u8>,
}

/// DC and AC tables for the luma and the chroma channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HuffmanSet {
    pub dc_luma: HuffmanTable,
    pub ac_luma: HuffmanTable,
    pub dc_chroma: HuffmanTable,
    pub ac_chroma: HuffmanTable,
}

/// One component plane of quantized coefficients.
///
/// Layout: blocks in raster order, 64 natural-order coefficients per block:
/// `coeffs[(by*blocks_w + bx)*64 + row*8 + col]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComponentPlane {
    pub quant_table_id: u8,
    pub coeffs: Vec<i32>,
}

/// Parsed baseline JPEG: geometry, three full-resolution coefficient planes
/// and the tables needed to write the stream back.
#[derive(Debug, Clone, PartialEq)]
pub struct JpegImage {
    pub width: usize,
    pub height: usize,
    pub planes: [ComponentPlane; 3],
    pub quant_tables: Vec<QuantTable>,
    /// Entropy tables of the source stream, reused on re-encode when they
    /// cover all symbols; `None` for synthesized images.
    pub huffman: Option<HuffmanSet>,
}

impl JpegImage {
    pub fn blocks_w(&self) -> usize {
        self.width / 8
    }

    pub fn blocks_h(&self) -> usize {
        self.height / 8
    }

    pub fn quant_for(&self, plane: usize) -> &QuantTable {
        &self.quant_tables[self.planes[plane].quant_table_id as usize]
    }

    /// Structured text dump of geometry, tables and coefficients, used for
    /// oracle comparisons against independent decoders.
    pub fn dump(&self) -> String {
        use std::fmt::Write;
        let mut s = String::new();
        writeln!(s, "size {}x{}", self.width, self.height).unwrap();
        for (i, q) in self.quant_tables.iter().enumerate() {
            write!(s, "quant {i}:").unwrap();
            for v in q.values() {
                write!(s, " {v}").unwrap();
            }
            writeln!(s).unwrap();
        }
        for (ci, p) in self.planes.iter().enumerate() {
            writeln!(
                s,
                "component {ci} quant={} blocks {}x{}",
                p.quant_table_id,
                self.blocks_h(),
                self.blocks_w()
            )
            .unwrap();
            for by in 0..self.blocks_h() {
                for bx in 0..self.blocks_w() {
                    write!(s, "block {by} {bx}:").unwrap();
                    let base = (by * self.blocks_w() + bx) * 64;
                    for k in 0..64 {
                        write!(s, " {}", p.coeffs[base + k]).unwrap();
                    }
                    writeln!(s).unwrap();
                }
            }
        }
        s
    }
}

/// T.81 Annex K.1 base luminance table (natural order).
pub const ANNEX_K_LUMA: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61,
    12, 12, 14, 19, 26, 58, 60, 55,
    14, 13, 16, 24, 40, 57, 69, 56,
    14, 17, 22, 29, 51, 87, 80, 62,
    18, 22, 37, 56, 68, 109, 103, 77,
    24, 35, 55, 64, 81, 104, 113, 92,
    49, 64, 78, 87, 103, 121, 120, 101,
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// T.81 Annex K.2 base chrominance table (natural order).
pub const ANNEX_K_CHROMA: [u16; 64] = [
    17, 18, 24, 47, 99, 99, 99, 99,
    18, 21, 26, 66, 99, 99, 99, 99,
    24, 26, 56, 99, 99, 99, 99, 99,
    47, 66, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
];

/// Scales the Annex-K base tables for a quality factor in 1..=100:
/// scale = 5000/qf below 50, otherwise 200 - 2*qf; each entry is
/// clamp(round(base*scale/100), 1, 255).
pub fn quant_tables_for_quality(qf: u32) -> Result<(QuantTable, QuantTable), JpegError> {
    if !(1..=100).contains(&qf) {
        return Err(JpegError::QualityOutOfRange(qf));
    }
    let scale: f64 = if qf < 50 { 5000.0 / qf as f64 } else { 200.0 - 2.0 * qf as f64 };
    let apply = |base: &[u16; 64]| {
        let mut out = [0u16; 64];
        for (o, &b) in out.iter_mut().zip(base) {
            let v = (b as f64 * scale / 100.0).round();
            *o = v.clamp(1.0, 255.0) as u16;
        }
        QuantTable::new(out).expect("clamped entries are nonzero")
    };
    Ok((apply(&ANNEX_K_LUMA), apply(&ANNEX_K_CHROMA)))
}

/// T.81 Annex K.3 typical Huffman tables; they cover every baseline symbol,
/// so any coefficient plane in range can be entropy-coded with them.
pub fn typical_huffman_set() -> HuffmanSet {
    let dc_counts = [0, 1, 5, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0];
    let dc_symbols: Vec<u8> = (0..=11).collect();
    let dc_chroma_counts = [0, 3, 1, 1, 1, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0];

    let ac_luma_counts = [0, 2, 1, 3, 3, 2, 4, 3, 5, 5, 4, 4, 0, 0, 1, 0x7D];
    let ac_luma_symbols: Vec<u8> = vec![
        0x01, 0x02, 0x03, 0x00, 0x04, 0x11, 0x05, 0x12, 0x21, 0x31, 0x41, 0x06, 0x13, 0x51, 0x61,
        0x07, 0x22, 0x71, 0x14, 0x32, 0x81, 0x91, 0xA1, 0x08, 0x23, 0x42, 0xB1, 0xC1, 0x15, 0x52,
        0xD1, 0xF0, 0x24, 0x33, 0x62, 0x72, 0x82, 0x09, 0x0A, 0x16, 0x17, 0x18, 0x19, 0x1A, 0x25,
        0x26, 0x27, 0x28, 0x29, 0x2A, 0x34, 0x35, 0x36, 0x37, 0x38, 0x39, 0x3A, 0x43, 0x44, 0x45,
        0x46, 0x47, 0x48, 0x49, 0x4A, 0x53, 0x54, 0x55, 0x56, 0x57, 0x58, 0x59, 0x5A, 0x63, 0x64,
        0x65, 0x66, 0x67, 0x68, 0x69, 0x6A, 0x73, 0x74, 0x75, 0x76, 0x77, 0x78, 0x79, 0x7A, 0x83,
        0x84, 0x85, 0x86, 0x87, 0x88, 0x89, 0x8A, 0x92, 0x93, 0x94, 0x95, 0x96, 0x97, 0x98, 0x99,
        0x9A, 0xA2, 0xA3, 0xA4, 0xA5, 0xA6, 0xA7, 0xA8, 0xA9, 0xAA, 0xB2, 0xB3, 0xB4, 0xB5, 0xB6,
        0xB7, 0xB8, 0xB9, 0xBA, 0xC2, 0xC3, 0xC4, 0xC5, 0xC6, 0xC7, 0xC8, 0xC9, 0xCA, 0xD2, 0xD3,
        0xD4, 0xD5, 0xD6, 0xD7, 0xD8, 0xD9, 0xDA, 0xE1, 0xE2, 0xE3, 0xE4, 0xE5, 0xE6, 0xE7, 0xE8,
        0xE9, 0xEA, 0xF1, 0xF2, 0xF3, 0xF4, 0xF5, 0xF6, 0xF7, 0xF8, 0xF9, 0xFA,
    ];
    let ac_chroma_counts = [0, 2, 1, 2, 4, 4, 3, 4, 7, 5, 4, 4, 0, 1, 2, 0x77];
    let ac_chroma_symbols: Vec<u8> = vec![
        0x00, 0x01, 0x02, 0x03, 0x11, 0x04, 0x05, 0x21, 0x31, 0x06, 0x12, 0x41, 0x51, 0x07, 0x61,
        0x71, 0x13, 0x22, 0x32, 0x81, 0x08, 0x14, 0x42, 0x91, 0xA1, 0xB1, 0xC1, 0x09, 0x23, 0x33,
        0x52, 0xF0, 0x15, 0x62, 0x72, 0xD1, 0x0A, 0x16, 0x24, 0x34, 0xE1, 0x25, 0xF1, 0x17, 0x18,
        0x19, 0x1A, 0x26, 0x27, 0x28, 0x29, 0x2A, 0x35, 0x36, 0x37, 0x38, 0x39, 0x3A, 0x43, 0x44,
        0x45, 0x46, 0x47, 0x48, 0x49, 0x4A, 0x53, 0x54, 0x55, 0x56, 0x57, 0x58, 0x59, 0x5A, 0x63,
        0x64, 0x65, 0x66, 0x67, 0x68, 0x69, 0x6A, 0x73, 0x74, 0x75, 0x76, 0x77, 0x78, 0x79, 0x7A,
        0x82, 0x83, 0x84, 0x85, 0x86, 0x87, 0x88, 0x89, 0x8A, 0x92, 0x93, 0x94, 0x95, 0x96, 0x97,
        0x98, 0x99, 0x9A, 0xA2, 0xA3, 0xA4, 0xA5, 0xA6, 0xA7, 0xA8, 0xA9, 0xAA, 0xB2, 0xB3, 0xB4,
        0xB5, 0xB6, 0xB7, 0xB8, 0xB9, 0xBA, 0xC2, 0xC3, 0xC4, 0xC5, 0xC6, 0xC7, 0xC8, 0xC9, 0xCA,
        0xD2, 0xD3, 0xD4, 0xD5, 0xD6, 0xD7, 0xD8, 0xD9, 0xDA, 0xE2, 0xE3, 0xE4, 0xE5, 0xE6, 0xE7,
        0xE8, 0xE9, 0xEA, 0xF2, 0xF3, 0xF4, 0xF5, 0xF6, 0xF7, 0xF8, 0xF9, 0xFA,
    ];
    HuffmanSet {
        dc_luma: HuffmanTable::new(dc_counts, dc_symbols.clone()).unwrap(),
        ac_luma: HuffmanTable::new(ac_luma_counts, ac_luma_symbols).unwrap(),
        dc_chroma: HuffmanTable::new(dc_chroma_counts, dc_symbols).unwrap(),
        ac_chroma: HuffmanTable::new(ac_chroma_counts, ac_chroma_symbols).unwrap(),
    }
}
