//! Deterministic synthetic cover/secret pairs for tests, demos and the
//! desk-scale acceptance runs. Smooth blob-and-ripple images compress the
//! way photographic content does (mostly low-frequency energy) without
//! shipping binary assets.

use crate::error::PipelineError;
use crate::image8::Rgb8Image;
use crate::jpeg::compress_rgb;
use crate::rng::DetRng;
use crate::trainer::TrainPair;

/// One smooth random RGB image.
pub fn synthetic_image(size: usize, rng: &mut DetRng) -> Rgb8Image {
    let mut img = Rgb8Image::filled(size, size, [0, 0, 0]);
    let n = size as f64;
    let (cx, cy) = (rng.uniform() * n, rng.uniform() * n);
    let (cx2, cy2) = (rng.uniform() * n, rng.uniform() * n);
    let soft = rng.uniform() * 8.0 + 4.0;
    let soft2 = rng.uniform() * 14.0 + 6.0;
    let phase = rng.uniform() * 6.0;
    let amp = rng.uniform() * 45.0 + 40.0;
    for y in 0..size {
        for x in 0..size {
            let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
            let d2 = ((x as f64 - cx2).powi(2) + (y as f64 - cy2).powi(2)).sqrt();
            let v = |k: f64| {
                (128.0 + amp * ((d / soft + phase + k).sin()) + (90.0 - amp) * ((d2 / soft2 - k).cos()))
                    .clamp(0.0, 255.0) as u8
            };
            img.set_pixel(x, y, [v(0.0), v(2.1), v(4.2)]);
        }
    }
    img
}

/// `n` cover/secret pairs at the given quality factor, covers already
/// compressed to coefficient form.
pub fn synthetic_pairs(
    n: usize,
    size: usize,
    quality: u32,
    seed: u64,
) -> Result<Vec<TrainPair>, PipelineError> {
    let mut rng = DetRng::new(seed).fork(0x7379_6e74);
    (0..n)
        .map(|_| {
            let cover_px = synthetic_image(size, &mut rng);
            let secret = synthetic_image(size, &mut rng);
            Ok(TrainPair { cover: compress_rgb(&cover_px, quality)?, secret })
        })
        .collect()
}
