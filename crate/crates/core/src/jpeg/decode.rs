//! Baseline JPEG parser.

use crate::error::JpegError;
use crate::freq::zigzag::zigzag_order;

use super::{ComponentPlane, HuffmanCodes, HuffmanSet, HuffmanTable, JpegImage, QuantTable};

const SOI: u8 = 0xD8;
const EOI: u8 = 0xD9;
const SOS: u8 = 0xDA;
const DQT: u8 = 0xDB;
const DHT: u8 = 0xC4;
const DRI: u8 = 0xDD;
const DNL: u8 = 0xDC;
const COM: u8 = 0xFE;

struct FrameComponent {
    id: u8,
    quant_table_id: u8,
}

/// Parses a baseline sequential 4:4:4 8-bit JFIF stream into quantized
/// coefficient planes. Unsupported stream classes are rejected.
pub fn parse(bytes: &[u8]) -> Result<JpegImage, JpegError> {
    if bytes.len() < 2 || bytes[0] != 0xFF || bytes[1] != SOI {
        return Err(JpegError::NotJpeg);
    }
    let mut pos = 2usize;
    let mut quant_tables: Vec<Option<QuantTable>> = vec![None; 4];
    let mut dc_tables: Vec<Option<HuffmanTable>> = vec![None; 4];
    let mut ac_tables: Vec<Option<HuffmanTable>> = vec![None; 4];
    let mut frame: Option<(usize, usize, Vec<FrameComponent>)> = None;
    let mut restart_interval = 0usize;

    loop {
        // next marker
        let marker = next_marker(bytes, &mut pos)?;
        match marker {
            EOI => return Err(JpegError::Malformed("EOI before scan data".into())),
            0xC0 => {
                let seg = segment(bytes, &mut pos)?;
                frame = Some(parse_sof0(seg)?);
            }
            0xC2 => return Err(JpegError::ProgressiveUnsupported),
            0xC9 | 0xCA | 0xCB | 0xCD | 0xCE | 0xCF => return Err(JpegError::ArithmeticUnsupported),
            0xC1 | 0xC3 | 0xC5 | 0xC6 | 0xC7 | 0xCC => return Err(JpegError::SofUnsupported(marker)),
            DHT => {
                let seg = segment(bytes, &mut pos)?;
                parse_dht(seg, &mut dc_tables, &mut ac_tables)?;
            }
            DQT => {
                let seg = segment(bytes, &mut pos)?;
                parse_dqt(seg, &mut quant_tables)?;
            }
            DRI => {
                let seg = segment(bytes, &mut pos)?;
                if seg.len() != 2 {
                    return Err(JpegError::Malformed("bad DRI length".into()));
                }
                restart_interval = u16::from_be_bytes([seg[0], seg[1]]) as usize;
            }
            DNL => return Err(JpegError::Malformed("unexpected DNL".into())),
            SOS => {
                let seg = segment(bytes, &mut pos)?;
                let (w, h, components) = frame
                    .as_ref()
                    .ok_or_else(|| JpegError::Malformed("SOS before SOF".into()))?;
                let scan = parse_sos(seg, components)?;
                let mut used_quant = Vec::new();
                let mut remap = [0u8; 4];
                for c in components {
                    let q = c.quant_table_id as usize;
                    let table = quant_tables[q]
                        .clone()
                        .ok_or(JpegError::MissingQuantTable(c.quant_table_id))?;
                    let idx = used_quant
                        .iter()
                        .position(|t| *t == table)
                        .unwrap_or_else(|| {
                            used_quant.push(table.clone());
                            used_quant.len() - 1
                        });
                    remap[q] = idx as u8;
                }
                let planes = decode_scan(
                    bytes,
                    &mut pos,
                    *w,
                    *h,
                    components,
                    &scan,
                    &dc_tables,
                    &ac_tables,
                    restart_interval,
                )?;
                expect_eoi(bytes, &mut pos)?;
                let huffman = saved_huffman(&scan, &dc_tables, &ac_tables);
                let planes: Vec<ComponentPlane> = planes
                    .into_iter()
                    .zip(components)
                    .map(|(coeffs, c)| ComponentPlane {
                        quant_table_id: remap[c.quant_table_id as usize],
                        coeffs,
                    })
                    .collect();
                let planes: [ComponentPlane; 3] =
                    planes.try_into().expect("exactly three components");
                return Ok(JpegImage {
                    width: *w,
                    height: *h,
                    planes,
                    quant_tables: used_quant,
                    huffman,
                });
            }
            // APPn, COM and anything else with a length field: skip
            0xE0..=0xEF | COM | 0xF0..=0xFD => {
                segment(bytes, &mut pos)?;
            }
            0x01 | 0xD0..=0xD7 => {
                return Err(JpegError::Malformed(format!(
                    "unexpected marker 0x{marker:02X} outside scan"
                )))
            }
            other => {
                return Err(JpegError::Malformed(format!("unhandled marker 0x{other:02X}")));
            }
        }
    }
}

fn next_marker(bytes: &[u8], pos: &mut usize) -> Result<u8, JpegError> {
    if *pos + 1 >= bytes.len() {
        return Err(JpegError::Truncated("expected marker"));
    }
    if bytes[*pos] != 0xFF {
        return Err(JpegError::Malformed(format!(
            "expected marker, found 0x{:02X}",
            bytes[*pos]
        )));
    }
    // markers may be preceded by fill bytes 0xFF
    let mut p = *pos + 1;
    while p < bytes.len() && bytes[p] == 0xFF {
        p += 1;
    }
    if p >= bytes.len() {
        return Err(JpegError::Truncated("expected marker"));
    }
    let m = bytes[p];
    *pos = p + 1;
    if m == 0 {
        // 0xFF00 is stuffed data, not a marker; only legal inside a scan.
        return Err(JpegError::Malformed("stuffed byte outside scan".into()));
    }
    Ok(m)
}

fn segment<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8], JpegError> {
    if *pos + 2 > bytes.len() {
        return Err(JpegError::Truncated("segment length"));
    }
    let len = u16::from_be_bytes([bytes[*pos], bytes[*pos + 1]]) as usize;
    if len < 2 {
        return Err(JpegError::Malformed("segment length < 2".into()));
    }
    if *pos + len > bytes.len() {
        return Err(JpegError::Truncated("segment body"));
    }
    let seg = &bytes[*pos + 2..*pos + len];
    *pos += len;
    Ok(seg)
}

fn parse_sof0(seg: &[u8]) -> Result<(usize, usize, Vec<FrameComponent>), JpegError> {
    if seg.len() < 6 {
        return Err(JpegError::Malformed("short SOF".into()));
    }
    let precision = seg[0];
    if precision != 8 {
        return Err(JpegError::PrecisionUnsupported(precision));
    }
    let height = u16::from_be_bytes([seg[1], seg[2]]);
    let width = u16::from_be_bytes([seg[3], seg[4]]);
    let ncomp = seg[5];
    if ncomp != 3 {
        return Err(JpegError::ComponentCountUnsupported(ncomp));
    }
    if height == 0 || width == 0 || height % 8 != 0 || width % 8 != 0 {
        return Err(JpegError::DimensionsNotMultipleOf8(width, height));
    }
    if seg.len() != 6 + 3 * ncomp as usize {
        return Err(JpegError::Malformed("bad SOF length".into()));
    }
    let mut components = Vec::with_capacity(3);
    for i in 0..ncomp as usize {
        let id = seg[6 + 3 * i];
        let sampling = seg[7 + 3 * i];
        let quant_table_id = seg[8 + 3 * i];
        if sampling != 0x11 {
            return Err(JpegError::SubsamplingUnsupported);
        }
        if quant_table_id > 3 {
            return Err(JpegError::Malformed("quant table id > 3".into()));
        }
        components.push(FrameComponent { id, quant_table_id });
    }
    Ok((width as usize, height as usize, components))
}

fn parse_dqt(mut seg: &[u8], tables: &mut [Option<QuantTable>]) -> Result<(), JpegError> {
    while !seg.is_empty() {
        let pq = seg[0] >> 4;
        let tq = (seg[0] & 0x0F) as usize;
        if tq > 3 || pq > 1 {
            return Err(JpegError::Malformed("bad DQT header".into()));
        }
        let entry_len = if pq == 0 { 1 } else { 2 };
        if seg.len() < 1 + 64 * entry_len {
            return Err(JpegError::Truncated("DQT entries"));
        }
        let mut zz = [0u16; 64];
        for (i, slot) in zz.iter_mut().enumerate() {
            *slot = if pq == 0 {
                seg[1 + i] as u16
            } else {
                u16::from_be_bytes([seg[1 + 2 * i], seg[2 + 2 * i]])
            };
        }
        tables[tq] = Some(QuantTable::from_zigzag(&zz)?);
        seg = &seg[1 + 64 * entry_len..];
    }
    Ok(())
}

fn parse_dht(
    mut seg: &[u8],
    dc: &mut [Option<HuffmanTable>],
    ac: &mut [Option<HuffmanTable>],
) -> Result<(), JpegError> {
    while !seg.is_empty() {
        if seg.len() < 17 {
            return Err(JpegError::Truncated("DHT header"));
        }
        let class = seg[0] >> 4;
        let id = (seg[0] & 0x0F) as usize;
        if class > 1 || id > 3 {
            return Err(JpegError::Malformed("bad DHT header".into()));
        }
        let mut counts = [0u8; 16];
        counts.copy_from_slice(&seg[1..17]);
        let total: usize = counts.iter().map(|&c| c as usize).sum();
        if seg.len() < 17 + total {
            return Err(JpegError::Truncated("DHT symbols"));
        }
        let symbols = seg[17..17 + total].to_vec();
        let table = HuffmanTable::new(counts, symbols)?;
        if class == 0 {
            dc[id] = Some(table);
        } else {
            ac[id] = Some(table);
        }
        seg = &seg[17 + total..];
    }
    Ok(())
}

struct ScanComponent {
    dc_id: usize,
    ac_id: usize,
}

fn parse_sos(seg: &[u8], components: &[FrameComponent]) -> Result<Vec<ScanComponent>, JpegError> {
    if seg.is_empty() {
        return Err(JpegError::Malformed("empty SOS".into()));
    }
    let n = seg[0] as usize;
    if n != components.len() || seg.len() != 1 + 2 * n + 3 {
        return Err(JpegError::Malformed("bad SOS header".into()));
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let id = seg[1 + 2 * i];
        if id != components[i].id {
            return Err(JpegError::Malformed("SOS component order differs from SOF".into()));
        }
        let sel = seg[2 + 2 * i];
        out.push(ScanComponent { dc_id: (sel >> 4) as usize, ac_id: (sel & 0x0F) as usize });
    }
    let (ss, se, ahal) = (seg[1 + 2 * n], seg[2 + 2 * n], seg[3 + 2 * n]);
    if ss != 0 || se != 63 || ahal != 0 {
        return Err(JpegError::Malformed("non-baseline spectral selection".into()));
    }
    Ok(out)
}

fn saved_huffman(
    scan: &[ScanComponent],
    dc: &[Option<HuffmanTable>],
    ac: &[Option<HuffmanTable>],
) -> Option<HuffmanSet> {
    Some(HuffmanSet {
        dc_luma: dc[scan[0].dc_id].clone()?,
        ac_luma: ac[scan[0].ac_id].clone()?,
        dc_chroma: dc[scan[1].dc_id].clone()?,
        ac_chroma: ac[scan[1].ac_id].clone()?,
    })
}

/// Entropy-coded-segment bit reader: un-stuffs 0xFF00 and stops at markers.
struct BitReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    bit_buf: u32,
    bit_count: u32,
}

impl<'a> BitReader<'a> {
    fn new(bytes: &'a [u8], pos: usize) -> Self {
        BitReader { bytes, pos, bit_buf: 0, bit_count: 0 }
    }

    fn read_bit(&mut self) -> Result<u32, JpegError> {
        if self.bit_count == 0 {
            if self.pos >= self.bytes.len() {
                return Err(JpegError::Truncated("entropy data"));
            }
            let b = self.bytes[self.pos];
            if b == 0xFF {
                if self.pos + 1 >= self.bytes.len() {
                    return Err(JpegError::Truncated("entropy data"));
                }
                if self.bytes[self.pos + 1] != 0x00 {
                    // a real marker where coefficient bits were expected
                    return Err(JpegError::Truncated("marker interrupts entropy data"));
                }
                self.pos += 2; // stuffed FF 00 encodes a literal 0xFF byte
                self.bit_buf = 0xFF;
            } else {
                self.pos += 1;
                self.bit_buf = b as u32;
            }
            self.bit_count = 8;
        }
        self.bit_count -= 1;
        Ok((self.bit_buf >> self.bit_count) & 1)
    }

    fn read_bits(&mut self, n: u8) -> Result<u32, JpegError> {
        let mut v = 0u32;
        for _ in 0..n {
            v = (v << 1) | self.read_bit()?;
        }
        Ok(v)
    }

    /// Discards partial bits and consumes an expected RSTn marker.
    fn sync_restart(&mut self, expected: u8) -> Result<(), JpegError> {
        self.bit_count = 0;
        if self.pos + 1 >= self.bytes.len() {
            return Err(JpegError::Truncated("restart marker"));
        }
        if self.bytes[self.pos] != 0xFF || self.bytes[self.pos + 1] != 0xD0 + expected {
            return Err(JpegError::Malformed(format!(
                "expected RST{expected}, found 0x{:02X}{:02X}",
                self.bytes[self.pos],
                self.bytes[self.pos + 1]
            )));
        }
        self.pos += 2;
        Ok(())
    }

    fn decode_symbol(&mut self, codes: &HuffmanCodes) -> Result<u8, JpegError> {
        let mut code = 0u32;
        for len in 1..=16usize {
            code = (code << 1) | self.read_bit()?;
            if (code as i64) <= codes.max_code[len] {
                let idx = codes.val_ptr[len] + (code - codes.min_code[len]) as usize;
                return Ok(codes.symbols[idx]);
            }
        }
        Err(JpegError::Malformed("invalid Huffman code".into()))
    }
}

fn receive_extend(reader: &mut BitReader, size: u8) -> Result<i32, JpegError> {
    if size == 0 {
        return Ok(0);
    }
    let v = reader.read_bits(size)? as i32;
    if v < (1 << (size - 1)) {
        Ok(v - (1 << size) + 1)
    } else {
        Ok(v)
    }
}

#[allow(clippy::too_many_arguments)]
fn decode_scan(
    bytes: &[u8],
    pos: &mut usize,
    width: usize,
    height: usize,
    components: &[FrameComponent],
    scan: &[ScanComponent],
    dc_tables: &[Option<HuffmanTable>],
    ac_tables: &[Option<HuffmanTable>],
    restart_interval: usize,
) -> Result<Vec<Vec<i32>>, JpegError> {
    let zig = zigzag_order();
    let n_blocks = (width / 8) * (height / 8);
    let mut planes: Vec<Vec<i32>> = components.iter().map(|_| vec![0i32; n_blocks * 64]).collect();

    let mut dc_codes = Vec::with_capacity(scan.len());
    let mut ac_codes = Vec::with_capacity(scan.len());
    for sc in scan {
        let dct = dc_tables[sc.dc_id]
            .as_ref()
            .ok_or(JpegError::MissingHuffmanTable { class: 0, id: sc.dc_id as u8 })?;
        let act = ac_tables[sc.ac_id]
            .as_ref()
            .ok_or(JpegError::MissingHuffmanTable { class: 1, id: sc.ac_id as u8 })?;
        dc_codes.push(dct.build_codes());
        ac_codes.push(act.build_codes());
    }

    let mut reader = BitReader::new(bytes, *pos);
    let mut dc_pred = vec![0i32; components.len()];
    let mut restart_count = 0u8;

    for mcu in 0..n_blocks {
        if restart_interval > 0 && mcu > 0 && mcu % restart_interval == 0 {
            reader.sync_restart(restart_count)?;
            restart_count = (restart_count + 1) & 7;
            dc_pred.iter_mut().for_each(|p| *p = 0);
        }
        for (ci, _) in components.iter().enumerate() {
            let block = &mut planes[ci][mcu * 64..(mcu + 1) * 64];
            let t = reader.decode_symbol(&dc_codes[ci])?;
            if t > 11 {
                return Err(JpegError::Malformed(format!("DC category {t} > 11")));
            }
            let diff = receive_extend(&mut reader, t)?;
            dc_pred[ci] += diff;
            if dc_pred[ci].abs() > 2047 {
                return Err(JpegError::Malformed("DC coefficient out of baseline range".into()));
            }
            block[0] = dc_pred[ci];
            let mut k = 1usize;
            while k < 64 {
                let rs = reader.decode_symbol(&ac_codes[ci])?;
                let run = (rs >> 4) as usize;
                let size = rs & 0x0F;
                if size == 0 {
                    if run == 15 {
                        k += 16;
                        continue;
                    }
                    break; // EOB
                }
                if size > 10 {
                    return Err(JpegError::Malformed(format!("AC category {size} > 10")));
                }
                k += run;
                if k > 63 {
                    return Err(JpegError::Malformed("AC run past block end".into()));
                }
                block[zig.natural_index(k)] = receive_extend(&mut reader, size)?;
                k += 1;
            }
        }
    }
    *pos = reader.pos;
    Ok(planes)
}

fn expect_eoi(bytes: &[u8], pos: &mut usize) -> Result<(), JpegError> {
    loop {
        if *pos + 1 >= bytes.len() {
            return Err(JpegError::Truncated("expected EOI"));
        }
        if bytes[*pos] != 0xFF {
            return Err(JpegError::Malformed("garbage after scan data".into()));
        }
        let m = bytes[*pos + 1];
        *pos += 2;
        match m {
            EOI => return Ok(()),
            0xFF => {
                *pos -= 1; // fill byte
            }
            _ => return Err(JpegError::Malformed(format!("marker 0x{m:02X} before EOI"))),
        }
    }
}
