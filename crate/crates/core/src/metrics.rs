//! Image quality metrics: PSNR (100 dB cap), SSIM (11x11 Gaussian window,
//! sigma 1.5) and mean absolute pixel discrepancy, all on 8-bit RGB.

use serde::{Deserialize, Serialize};

use crate::error::PipelineError;
use crate::image8::Rgb8Image;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const LEVELS: f64 = 255.0;

fn check_dims(a: &Rgb8Image, b: &Rgb8Image) -> Result<(), PipelineError> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(PipelineError::SizeMismatch(format!(
            "{}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    Ok(())
}

/// 10*log10(255^2 / MSE), capped at 100 dB for identical images.
pub fn psnr(a: &Rgb8Image, b: &Rgb8Image) -> Result<f64, PipelineError> {
    check_dims(a, b)?;
    let mse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / a.data().len() as f64;
    if mse == 0.0 {
        return Ok(100.0);
    }
    Ok((10.0 * (LEVELS * LEVELS / mse).log10()).min(100.0))
}

/// Mean absolute difference on the 0..255 scale.
pub fn apd(a: &Rgb8Image, b: &Rgb8Image) -> Result<f64, PipelineError> {
    check_dims(a, b)?;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).abs())
        .sum::<f64>()
        / a.data().len() as f64)
}

fn gaussian_window() -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW * SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for y in 0..SSIM_WINDOW {
        for x in 0..SSIM_WINDOW {
            let d2 = (x as f64 - c).powi(2) + (y as f64 - c).powi(2);
            let v = (-d2 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            w[y * SSIM_WINDOW + x] = v;
            sum += v;
        }
    }
    w.iter_mut().for_each(|v| *v /= sum);
    w
}

/// Mean SSIM over valid window positions, computed per channel and
/// averaged. Errors when the image is smaller than the window.
pub fn ssim(a: &Rgb8Image, b: &Rgb8Image) -> Result<f64, PipelineError> {
    check_dims(a, b)?;
    let (w, h) = (a.width(), a.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(PipelineError::SizeMismatch(format!(
            "image {w}x{h} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let win = gaussian_window();
    let c1 = (SSIM_K1 * LEVELS).powi(2);
    let c2 = (SSIM_K2 * LEVELS).powi(2);
    let mut total = 0.0;
    for ch in 0..3 {
        let pa = a.plane_f64(ch);
        let pb = b.plane_f64(ch);
        let mut acc = 0.0;
        let mut count = 0usize;
        for oy in 0..=(h - SSIM_WINDOW) {
            for ox in 0..=(w - SSIM_WINDOW) {
                let (mut mx, mut my) = (0.0, 0.0);
                let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
                for wy in 0..SSIM_WINDOW {
                    for wx in 0..SSIM_WINDOW {
                        let g = win[wy * SSIM_WINDOW + wx];
                        let x = pa[(oy + wy) * w + ox + wx];
                        let y = pb[(oy + wy) * w + ox + wx];
                        mx += g * x;
                        my += g * y;
                        sxx += g * (x * x);
                        syy += g * (y * y);
                        sxy += g * (x * y);
                    }
                }
                let vx = sxx - mx * mx;
                let vy = syy - my * my;
                let cov = sxy - mx * my;
                let s = ((2.0 * (mx * my) + c1) * (2.0 * cov + c2))
                    / (((mx * mx) + (my * my) + c1) * (vx + vy + c2));
                acc += s;
                count += 1;
            }
        }
        total += acc / count as f64;
    }
    Ok(total / 3.0)
}

/// Quality metrics of one cover/secret pair after a hide/reveal cycle.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairMetrics {
    pub stego_psnr: f64,
    pub stego_ssim: f64,
    pub stego_apd: f64,
    pub revealed_psnr: f64,
    pub revealed_ssim: f64,
    pub revealed_apd: f64,
}

/// Aggregate report over an evaluation set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub pairs: Vec<PairMetrics>,
    pub mean_stego_psnr: f64,
    pub mean_stego_ssim: f64,
    pub mean_stego_apd: f64,
    pub mean_revealed_psnr: f64,
    pub mean_revealed_ssim: f64,
    pub mean_revealed_apd: f64,
    pub detection_accuracy: Option<f64>,
}

impl MetricsReport {
    pub fn from_pairs(pairs: Vec<PairMetrics>, detection_accuracy: Option<f64>) -> Self {
        let n = pairs.len().max(1) as f64;
        let mean = |f: fn(&PairMetrics) -> f64| pairs.iter().map(f).sum::<f64>() / n;
        MetricsReport {
            mean_stego_psnr: mean(|p| p.stego_psnr),
            mean_stego_ssim: mean(|p| p.stego_ssim),
            mean_stego_apd: mean(|p| p.stego_apd),
            mean_revealed_psnr: mean(|p| p.revealed_psnr),
            mean_revealed_ssim: mean(|p| p.revealed_ssim),
            mean_revealed_apd: mean(|p| p.revealed_apd),
            detection_accuracy,
            pairs,
        }
    }
}
