//! Reversible frequency-domain conversions between images and network maps.
//!
//! The coarse representation keeps every DCT coefficient at its within-block
//! position, giving a (6, H, W) map: three cover channels (dequantized,
//! scaled) and three secret channels (block DCT of normalized pixels). The
//! fine representation is a pure index permutation of the coarse one that
//! groups all coefficients of one frequency sub-band on one channel, in
//! zigzag order: (64*6, H/8, W/8).

pub mod dct8;
pub mod zigzag;

use crate::error::{PipelineError, TensorError};
use crate::image8::Rgb8Image;
use crate::jpeg::JpegImage;
use crate::scalar::{round_half_away, Scalar};
use crate::tensor::graph::IndexPerm;
use crate::tensor::Tensor;

use zigzag::zigzag_order;

/// Scale applied to dequantized cover coefficients so network inputs are O(1).
pub const COEF_SCALE: f64 = 1.0 / 1024.0;

/// Number of coarse channels: cover Y/Cb/Cr + secret R/G/B.
pub const COARSE_CHANNELS: usize = 6;

/// Number of fine channels: 64 sub-bands x 6 coarse channels.
pub const FINE_CHANNELS: usize = 64 * COARSE_CHANNELS;

/// (6, H, W) frequency map; channels [Y, Cb, Cr, R, G, B].
#[derive(Debug, Clone)]
pub struct CoarseMaps<S> {
    tensor: Tensor<S>,
}

impl<S: Scalar> CoarseMaps<S> {
    pub fn new(tensor: Tensor<S>) -> Result<Self, TensorError> {
        match tensor.shape() {
            [c, h, w] if *c == COARSE_CHANNELS && h % 8 == 0 && w % 8 == 0 && *h > 0 && *w > 0 => {
                Ok(CoarseMaps { tensor })
            }
            s => Err(TensorError::ShapeMismatch(format!(
                "coarse maps must be (6, 8a, 8b), got {s:?}"
            ))),
        }
    }

    pub fn tensor(&self) -> &Tensor<S> {
        &self.tensor
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[2]
    }
}

/// (384, H/8, W/8) frequency map; channel z*6+c for zigzag rank z.
#[derive(Debug, Clone)]
pub struct FineMaps<S> {
    tensor: Tensor<S>,
}

impl<S: Scalar> FineMaps<S> {
    pub fn new(tensor: Tensor<S>) -> Result<Self, TensorError> {
        match tensor.shape() {
            [c, _, _] if *c == FINE_CHANNELS => Ok(FineMaps { tensor }),
            s => Err(TensorError::ShapeMismatch(format!(
                "fine maps must be (384, h, w), got {s:?}"
            ))),
        }
    }

    pub fn tensor(&self) -> &Tensor<S> {
        &self.tensor
    }
}

/// The coarse->fine index permutation for an (C, H, W) coarse layout:
/// value at coarse (c, 8*by+u, 8*bx+v) moves to fine (zz(u,v)*C + c, by, bx).
pub fn ffd_perm(channels: usize, h: usize, w: usize) -> IndexPerm {
    assert!(h % 8 == 0 && w % 8 == 0);
    let (bh, bw) = (h / 8, w / 8);
    let zig = zigzag_order();
    let mut fwd = vec![0u32; channels * h * w];
    for z in 0..64 {
        let (u, v) = zig.position(z);
        for c in 0..channels {
            let fine_c = z * channels + c;
            for by in 0..bh {
                for bx in 0..bw {
                    let fine_idx = (fine_c * bh + by) * bw + bx;
                    let coarse_idx = (c * h + by * 8 + u) * w + bx * 8 + v;
                    fwd[fine_idx] = coarse_idx as u32;
                }
            }
        }
    }
    IndexPerm::new(fwd)
}

/// Pure sub-band gathering: coarse (C,H,W) -> fine (64C, H/8, W/8).
pub fn ffd<S: Scalar>(x: &CoarseMaps<S>) -> FineMaps<S> {
    let (h, w) = (x.height(), x.width());
    let perm = ffd_perm(COARSE_CHANNELS, h, w);
    let src = x.tensor.data();
    let data: Vec<S> = perm.fwd.iter().map(|&i| src[i as usize]).collect();
    FineMaps {
        tensor: Tensor::new(vec![FINE_CHANNELS, h / 8, w / 8], data).expect("permutation"),
    }
}

/// Exact inverse of [`ffd`].
pub fn iffd<S: Scalar>(y: &FineMaps<S>) -> CoarseMaps<S> {
    let shape = y.tensor.shape();
    let (bh, bw) = (shape[1], shape[2]);
    let (h, w) = (bh * 8, bw * 8);
    let perm = ffd_perm(COARSE_CHANNELS, h, w);
    let src = y.tensor.data();
    let data: Vec<S> = perm.inv.iter().map(|&i| src[i as usize]).collect();
    CoarseMaps {
        tensor: Tensor::new(vec![COARSE_CHANNELS, h, w], data).expect("permutation"),
    }
}

/// Cover-side coarse channels: dequantized coefficients at their block
/// positions, scaled by [`COEF_SCALE`]. Shape (3, H, W).
pub fn cover_coarse<S: Scalar>(img: &JpegImage) -> Tensor<S> {
    let (h, w) = (img.height, img.width);
    let mut data = vec![S::zero(); 3 * h * w];
    for (ci, plane) in img.planes.iter().enumerate() {
        let q = img.quant_for(ci);
        for by in 0..img.blocks_h() {
            for bx in 0..img.blocks_w() {
                let base = (by * img.blocks_w() + bx) * 64;
                for u in 0..8 {
                    for v in 0..8 {
                        let k = u * 8 + v;
                        let deq = plane.coeffs[base + k] as f64 * q.value(k) as f64;
                        data[(ci * h + by * 8 + u) * w + bx * 8 + v] =
                            S::from_f64(deq * COEF_SCALE);
                    }
                }
            }
        }
    }
    Tensor::new(vec![3, h, w], data).expect("geometry")
}

/// Secret-side coarse channels: pixels mapped to [-0.5, 0.5] then block DCT
/// per color plane. Shape (3, H, W).
pub fn secret_coarse<S: Scalar>(img: &Rgb8Image) -> Tensor<S> {
    let norm = secret_normalized::<S>(img);
    let (h, w) = (img.height(), img.width());
    let data = dct8::block_transform_chw(norm.data(), 3, h, w, false);
    Tensor::new(vec![3, h, w], data).expect("geometry")
}

/// Pixels mapped to [-0.5, 0.5]: (p - 127.5)/255, channel planes R,G,B.
pub fn secret_normalized<S: Scalar>(img: &Rgb8Image) -> Tensor<S> {
    let (h, w) = (img.height(), img.width());
    let mut data = vec![S::zero(); 3 * h * w];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let p = img.pixel(x, y)[c] as f64;
                data[(c * h + y) * w + x] = S::from_f64((p - 127.5) / 255.0);
            }
        }
    }
    Tensor::new(vec![3, h, w], data).expect("geometry")
}

/// Coarse-grained frequency decomposition of a cover/secret pair.
pub fn cfd<S: Scalar>(cover: &JpegImage, secret: &Rgb8Image) -> Result<CoarseMaps<S>, PipelineError> {
    if cover.width != secret.width() || cover.height != secret.height() {
        return Err(PipelineError::SizeMismatch(format!(
            "cover {}x{} vs secret {}x{}",
            cover.width,
            cover.height,
            secret.width(),
            secret.height()
        )));
    }
    let c = cover_coarse::<S>(cover);
    let s = secret_coarse::<S>(secret);
    let mut data = Vec::with_capacity(6 * cover.height * cover.width);
    data.extend_from_slice(c.data());
    data.extend_from_slice(s.data());
    Ok(CoarseMaps {
        tensor: Tensor::new(vec![COARSE_CHANNELS, cover.height, cover.width], data)?,
    })
}

/// Maps cover-side coarse channels back to quantized coefficient planes:
/// unscale, divide by the quantization entry, round half away from zero and
/// clamp to the encodable baseline range. Tables, geometry and entropy
/// tables come from `template`.
pub fn inverse_cfd_cover<S: Scalar>(
    channels: &Tensor<S>,
    template: &JpegImage,
) -> Result<JpegImage, PipelineError> {
    let (h, w) = (template.height, template.width);
    if channels.shape() != [3, h, w] {
        return Err(TensorError::ShapeMismatch(format!(
            "cover channels must be (3, {h}, {w}), got {:?}",
            channels.shape()
        ))
        .into());
    }
    let mut out = template.clone();
    let data = channels.data();
    for ci in 0..3 {
        let q = template.quant_for(ci).clone();
        let plane = &mut out.planes[ci];
        for by in 0..h / 8 {
            for bx in 0..w / 8 {
                let base = (by * (w / 8) + bx) * 64;
                for u in 0..8 {
                    for v in 0..8 {
                        let k = u * 8 + v;
                        let val = data[(ci * h + by * 8 + u) * w + bx * 8 + v].into_f64();
                        let coef = round_half_away(val / COEF_SCALE / q.value(k) as f64);
                        plane.coeffs[base + k] = coef.clamp(-1023.0, 1023.0) as i32;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Maps secret-side coarse channels back to pixels: inverse block DCT,
/// then p = round(v*255 + 127.5) clamped to 0..=255.
pub fn inverse_cfd_secret<S: Scalar>(channels: &Tensor<S>) -> Result<Rgb8Image, PipelineError> {
    let [c, h, w] = match channels.shape() {
        [c, h, w] if *c == 3 && h % 8 == 0 && w % 8 == 0 => [*c, *h, *w],
        s => {
            return Err(TensorError::ShapeMismatch(format!(
                "secret channels must be (3, 8a, 8b), got {s:?}"
            ))
            .into())
        }
    };
    let spatial = dct8::block_transform_chw(channels.data(), c, h, w, true);
    let mut data = vec![0u8; h * w * 3];
    for ch in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let v = spatial[(ch * h + y) * w + x].into_f64();
                data[(y * w + x) * 3 + ch] = round_half_away(v * 255.0 + 127.5).clamp(0.0, 255.0) as u8;
            }
        }
    }
    Ok(Rgb8Image::new(w, h, data)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::DetRng;

    fn random_image(w: usize, h: usize, rng: &mut DetRng) -> Rgb8Image {
        let data = (0..w * h * 3).map(|_| (rng.next_u64() & 0xFF) as u8).collect();
        Rgb8Image::new(w, h, data).unwrap()
    }

    #[test]
    fn ffd_iffd_are_bitwise_inverse() {
        let mut rng = DetRng::new(5);
        for _ in 0..10 {
            let t = Tensor::<f32>::from_fn(vec![6, 16, 24], |_| rng.normal() as f32);
            let x = CoarseMaps::new(t).unwrap();
            let back = iffd(&ffd(&x));
            assert_eq!(x.tensor().data(), back.tensor().data());
        }
    }

    #[test]
    fn ffd_channel_placement() {
        // coarse (0,0,0): Y-channel DC of block (0,0) -> fine (0,0,0)
        let mut t = Tensor::<f64>::zeros(vec![6, 16, 16]);
        t.data_mut()[0] = 1.0;
        // coarse (1, 0, 1): Cb, (u,v)=(0,1) of block (0,0) -> rank(0,1)=1 -> channel 1*6+1=7
        t.data_mut()[16 * 16 + 1] = 2.0;
        let fine = ffd(&CoarseMaps::new(t).unwrap());
        let f = fine.tensor().data();
        assert_eq!(f[0], 1.0);
        let bh = 2 * 2; // (H/8)*(W/8)
        assert_eq!(f[7 * bh], 2.0);
        // multiset preserved
        assert_eq!(f.iter().filter(|&&v| v != 0.0).count(), 2);
    }

    #[test]
    fn secret_round_trip_within_one_level() {
        let mut rng = DetRng::new(17);
        let img = random_image(16, 16, &mut rng);
        let coarse = secret_coarse::<f64>(&img);
        let back = inverse_cfd_secret(&coarse).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                for c in 0..3 {
                    let a = img.pixel(x, y)[c] as i32;
                    let b = back.pixel(x, y)[c] as i32;
                    assert!((a - b).abs() <= 1, "pixel ({x},{y},{c}): {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn zero_secret_channels_decode_to_mid_gray() {
        let t = Tensor::<f32>::zeros(vec![3, 8, 8]);
        let img = inverse_cfd_secret(&t).unwrap();
        assert!(img.data().iter().all(|&p| p == 128));
    }

    #[test]
    fn mid_gray_secret_has_near_zero_coarse() {
        let img = Rgb8Image::filled(16, 16, [128, 128, 128]);
        let coarse = secret_coarse::<f64>(&img);
        let dc_bound = 8.0 * (0.5 / 255.0) + 1e-9;
        let (h, w) = (16, 16);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let v = coarse.data()[(c * h + y) * w + x];
                    if y % 8 == 0 && x % 8 == 0 {
                        assert!(v.abs() <= dc_bound, "DC {v}");
                    } else {
                        assert!(v.abs() < 1e-12, "AC {v}");
                    }
                }
            }
        }
    }
}
