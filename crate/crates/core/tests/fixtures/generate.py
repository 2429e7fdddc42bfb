#!/usr/bin/env python3
"""Regenerates the codec test fixtures.

Outputs, all committed:
  fNN_*.jpg         4:4:4 baseline JPEGs written by Pillow (libjpeg)
  fNN_*.oracle.rgb  RGB from the independent exact-math decoder below
                    (float IDCT, BT.601, numpy half-to-even rounding)
  fNN_*.libjpeg.rgb libjpeg's own decoded RGB bytes
  fNN_*.coefdump    quantized DCT coefficients from the independent decoder,
                    in the same text layout the library's `dump` uses
  bad_*.jpg         unsupported stream classes (subsampled, progressive)

The coefficient decoder here is written from scratch against ITU T.81 and
shares nothing with the Rust implementation. Its pixel reconstruction is
validated against libjpeg within the fixed-point error envelope (libjpeg
rounds samples to 8-bit and then rounds again after color conversion, so
roughly 40% of pixels sit one level off the once-rounded exact value and a
few reach two; the gate below pins that envelope).

Requires: Pillow, numpy.
"""

import io
import struct
import sys
from pathlib import Path

import numpy as np
from PIL import Image

HERE = Path(__file__).parent

ZIGZAG = [
    (0,0),(0,1),(1,0),(2,0),(1,1),(0,2),(0,3),(1,2),
    (2,1),(3,0),(4,0),(3,1),(2,2),(1,3),(0,4),(0,5),
    (1,4),(2,3),(3,2),(4,1),(5,0),(6,0),(5,1),(4,2),
    (3,3),(2,4),(1,5),(0,6),(0,7),(1,6),(2,5),(3,4),
    (4,3),(5,2),(6,1),(7,0),(7,1),(6,2),(5,3),(4,4),
    (3,5),(2,6),(1,7),(2,7),(3,6),(4,5),(5,4),(6,3),
    (7,2),(7,3),(6,4),(5,5),(4,6),(3,7),(4,7),(5,6),
    (6,5),(7,4),(7,5),(6,6),(5,7),(6,7),(7,6),(7,7),
]


class BitReader:
    def __init__(self, data, pos):
        self.data = data
        self.pos = pos
        self.bits = []

    def _fill(self):
        b = self.data[self.pos]
        if b == 0xFF:
            assert self.data[self.pos + 1] == 0x00, "marker inside scan"
            self.pos += 2
        else:
            self.pos += 1
        self.bits.extend((b >> i) & 1 for i in range(7, -1, -1))

    def bit(self):
        if not self.bits:
            self._fill()
        return self.bits.pop(0)

    def bits_value(self, n):
        v = 0
        for _ in range(n):
            v = (v << 1) | self.bit()
        return v

    def align_restart(self, idx):
        self.bits = []
        m = self.data[self.pos:self.pos + 2]
        assert m == bytes([0xFF, 0xD0 + idx]), f"expected RST{idx}"
        self.pos += 2


def build_huffman(counts, symbols):
    table = {}
    code = 0
    k = 0
    for length in range(1, 17):
        for _ in range(counts[length - 1]):
            table[(length, code)] = symbols[k]
            code += 1
            k += 1
        code <<= 1
    return table


def decode_symbol(reader, table):
    code = 0
    for length in range(1, 17):
        code = (code << 1) | reader.bit()
        if (length, code) in table:
            return table[(length, code)]
    raise ValueError("bad huffman code")


def extend(v, size):
    if size == 0:
        return 0
    return v - (1 << size) + 1 if v < (1 << (size - 1)) else v


def decode_coefficients(data):
    assert data[0:2] == b"\xff\xd8"
    pos = 2
    qtables = {}
    dc_tables, ac_tables = {}, {}
    frame = None
    restart = 0
    while True:
        assert data[pos] == 0xFF
        marker = data[pos + 1]
        pos += 2
        if marker == 0xD9:
            raise ValueError("EOI before scan")
        length = struct.unpack(">H", data[pos:pos + 2])[0]
        seg = data[pos + 2:pos + length]
        pos += length
        if marker == 0xDB:
            i = 0
            while i < len(seg):
                pq, tq = seg[i] >> 4, seg[i] & 15
                n = 128 if pq else 64
                raw = seg[i + 1:i + 1 + n]
                vals = (struct.unpack(f">{64}H", raw) if pq
                        else list(raw))
                table = np.zeros((8, 8), dtype=np.int64)
                for rank, (r, c) in enumerate(ZIGZAG):
                    table[r, c] = vals[rank]
                qtables[tq] = table
                i += 1 + n
        elif marker == 0xC4:
            i = 0
            while i < len(seg):
                cls, tid = seg[i] >> 4, seg[i] & 15
                counts = list(seg[i + 1:i + 17])
                total = sum(counts)
                symbols = list(seg[i + 17:i + 17 + total])
                (ac_tables if cls else dc_tables)[tid] = build_huffman(counts, symbols)
                i += 17 + total
        elif marker == 0xC0:
            precision = seg[0]
            h, w = struct.unpack(">HH", seg[1:5])
            ncomp = seg[5]
            assert precision == 8 and ncomp == 3
            comps = []
            for i in range(ncomp):
                cid, samp, tq = seg[6 + 3 * i:9 + 3 * i]
                assert samp == 0x11, "subsampled"
                comps.append((cid, tq))
            frame = (w, h, comps)
        elif marker == 0xC2:
            raise ValueError("progressive")
        elif marker == 0xDD:
            restart = struct.unpack(">H", seg)[0]
        elif marker == 0xDA:
            w, h, comps = frame
            n = seg[0]
            selectors = []
            for i in range(n):
                cid, sel = seg[1 + 2 * i], seg[2 + 2 * i]
                selectors.append((sel >> 4, sel & 15))
            reader = BitReader(data, pos)
            bw, bh = w // 8, h // 8
            planes = [np.zeros((bh * bw, 64), dtype=np.int64) for _ in comps]
            pred = [0] * len(comps)
            rst = 0
            for mcu in range(bw * bh):
                if restart and mcu > 0 and mcu % restart == 0:
                    reader.align_restart(rst)
                    rst = (rst + 1) & 7
                    pred = [0] * len(comps)
                for ci in range(len(comps)):
                    dc_t = dc_tables[selectors[ci][0]]
                    ac_t = ac_tables[selectors[ci][1]]
                    t = decode_symbol(reader, dc_t)
                    pred[ci] += extend(reader.bits_value(t), t)
                    block = planes[ci][mcu]
                    block[0] = pred[ci]
                    k = 1
                    while k < 64:
                        rs = decode_symbol(reader, ac_t)
                        run, size = rs >> 4, rs & 15
                        if size == 0:
                            if run == 15:
                                k += 16
                                continue
                            break
                        k += run
                        r, c = ZIGZAG[k]
                        block[r * 8 + c] = extend(reader.bits_value(size), size)
                        k += 1
            return w, h, comps, qtables, planes
        # other segments (APPn/COM) skipped


def dump_text(w, h, comps, qtables, planes):
    # deduplicate tables by value, in component order (matches the library)
    used, remap = [], {}
    for _, tq in comps:
        key = qtables[tq].tobytes()
        for i, u in enumerate(used):
            if u.tobytes() == key:
                remap[tq] = i
                break
        else:
            remap[tq] = len(used)
            used.append(qtables[tq])
    lines = [f"size {w}x{h}"]
    for i, t in enumerate(used):
        lines.append("quant %d: %s" % (i, " ".join(str(v) for v in t.reshape(-1))))
    bw, bh = w // 8, h // 8
    for ci, (_, tq) in enumerate(comps):
        lines.append(f"component {ci} quant={remap[tq]} blocks {bh}x{bw}")
        for by in range(bh):
            for bx in range(bw):
                block = planes[ci][by * bw + bx]
                lines.append(f"block {by} {bx}: " + " ".join(str(v) for v in block))
    return "\n".join(lines) + "\n"


def idct_pixels(w, h, comps, qtables, planes):
    basis = np.zeros((8, 8))
    for u in range(8):
        a = np.sqrt(1 / 8) if u == 0 else 0.5
        for n in range(8):
            basis[u, n] = a * np.cos((2 * n + 1) * u * np.pi / 16)
    bw, bh = w // 8, h // 8
    ycc = np.zeros((h, w, 3))
    for ci, (_, tq) in enumerate(comps):
        q = qtables[tq].reshape(-1)
        for by in range(bh):
            for bx in range(bw):
                coef = (planes[ci][by * bw + bx] * q).reshape(8, 8).astype(float)
                px = basis.T @ coef @ basis + 128.0
                ycc[by * 8:by * 8 + 8, bx * 8:bx * 8 + 8, ci] = px
    y, cb, cr = ycc[..., 0], ycc[..., 1] - 128, ycc[..., 2] - 128
    rgb = np.stack([
        y + 1.402 * cr,
        y - 0.344136 * cb - 0.714136 * cr,
        y + 1.772 * cb,
    ], axis=-1)
    return np.clip(np.round(rgb), 0, 255).astype(np.uint8)


def synth_images():
    rng = np.random.default_rng(20260810)
    out = []
    for i, size in enumerate([64, 64, 64, 64, 32, 16]):
        yy, xx = np.mgrid[0:size, 0:size].astype(float) / size
        img = np.zeros((size, size, 3))
        for _ in range(4):  # smooth random blobs
            cx, cy, sg = rng.uniform(0, 1, 2).tolist() + [rng.uniform(0.1, 0.4)]
            blob = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sg ** 2))
            img += blob[..., None] * rng.uniform(0, 255, 3)
        img += np.stack([xx * 80, yy * 80, (xx + yy) * 40], axis=-1)
        img = np.clip(img * (200 / max(img.max(), 1e-9)) + rng.uniform(0, 30), 0, 255)
        out.append((f"f{i:02d}_blobs{size}", img.astype(np.uint8)))
    return out


def main():
    entries = synth_images()
    qualities = [75, 75, 75, 90, 75, 75]
    for (name, arr), q in zip(entries, qualities):
        Image.fromarray(arr).save(HERE / f"{name}.jpg", quality=q, subsampling=0)

    # uniform mid-gray, all AC coefficients must be zero
    gray = np.full((16, 16, 3), 128, dtype=np.uint8)
    Image.fromarray(gray).save(HERE / "f06_gray16.jpg", quality=75, subsampling=0)

    # unsupported classes for rejection tests
    Image.fromarray(entries[0][1]).save(HERE / "bad_subsampled.jpg", quality=75, subsampling=2)
    Image.fromarray(entries[0][1]).save(HERE / "bad_progressive.jpg", quality=75,
                                        subsampling=0, progressive=True)

    worst_overall = 0
    worst_mean = 0.0
    for path in sorted(HERE.glob("f*.jpg")):
        data = path.read_bytes()
        w, h, comps, qtables, planes = decode_coefficients(data)
        (HERE / f"{path.stem}.coefdump").write_text(dump_text(w, h, comps, qtables, planes))
        ref = np.asarray(Image.open(io.BytesIO(data)).convert("RGB"))
        (HERE / f"{path.stem}.libjpeg.rgb").write_bytes(ref.tobytes())
        mine = idct_pixels(w, h, comps, qtables, planes)
        (HERE / f"{path.stem}.oracle.rgb").write_bytes(mine.tobytes())
        diff = np.abs(mine.astype(int) - ref.astype(int))
        worst_overall = max(worst_overall, int(diff.max()))
        worst_mean = max(worst_mean, float(diff.mean()))
        print(f"{path.name}: {w}x{h}, vs libjpeg: max {int(diff.max())}, mean {diff.mean():.4f}")
    print(f"worst: max {worst_overall}, mean {worst_mean:.4f}")
    if worst_overall > 3 or worst_mean > 0.5:
        print("WARNING: oracle deviates beyond libjpeg fixed-point envelope", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
