//! The training loop: seeded batches, per-sample graphs evaluated in
//! parallel, gradients reduced in a fixed order, one Adam step per batch.

use rayon::prelude::*;

use crate::error::PipelineError;
use crate::image8::Rgb8Image;
use crate::jpeg::{self, JpegImage};
use crate::loss::{sample_losses, LossBreakdown};
use crate::metrics::{apd, psnr, ssim, MetricsReport, PairMetrics};
use crate::model::MragModel;
use crate::optim::{Adam, TrainConfig};
use crate::rng::DetRng;
use crate::scalar::Scalar;
use crate::surrogate::Surrogate;
use crate::tensor::graph::Graph;

/// One cover/secret training pair.
#[derive(Clone)]
pub struct TrainPair {
    pub cover: JpegImage,
    pub secret: Rgb8Image,
}

/// Trains the model against a frozen surrogate. Returns one loss record
/// per step. Deterministic for a fixed config; the surrogate is
/// checksummed before and after to enforce the freeze contract.
pub fn train<S: Scalar>(
    model: &mut MragModel<S>,
    surrogate: &Surrogate<S>,
    pairs: &[TrainPair],
    cfg: &TrainConfig,
) -> Result<Vec<LossBreakdown>, PipelineError> {
    train_with_observer(model, surrogate, pairs, cfg, |_, _| {})
}

pub fn train_with_observer<S: Scalar>(
    model: &mut MragModel<S>,
    surrogate: &Surrogate<S>,
    pairs: &[TrainPair],
    cfg: &TrainConfig,
    mut observe: impl FnMut(usize, &LossBreakdown),
) -> Result<Vec<LossBreakdown>, PipelineError> {
    if pairs.len() < 8 {
        return Err(PipelineError::Data(format!(
            "training needs at least 8 pairs, got {}",
            pairs.len()
        )));
    }
    if !surrogate.trained {
        return Err(PipelineError::Config("surrogate must be pretrained and frozen".into()));
    }
    let frozen_checksum = surrogate.params.checksum();
    let mut adam = Adam::new(cfg);
    let mut rng = DetRng::new(cfg.seed).fork(0x7472_6169);
    let mut log = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let batch: Vec<usize> = (0..cfg.batch_size).map(|_| rng.below(pairs.len())).collect();
        let scale = 1.0 / batch.len() as f64;

        let results: Vec<Result<(crate::tensor::param::ParamStore<S>, LossBreakdown), PipelineError>> =
            batch
                .par_iter()
                .map(|&idx| {
                    let pair = &pairs[idx];
                    let mut g = Graph::new();
                    let losses = sample_losses(&mut g, model, surrogate, &pair.cover, &pair.secret)?;
                    let scaled = g.mul_scalar(losses.l_total, scale)?;
                    let mut grads = model.params.clone();
                    grads.zero_grads();
                    g.backward(scaled, &mut grads)?;
                    Ok((grads, losses.breakdown(&g)))
                })
                .collect();

        model.params.zero_grads();
        let mut breakdowns = Vec::with_capacity(batch.len());
        for r in results {
            let (grads, breakdown) = r.map_err(|e| PipelineError::NonFiniteLoss {
                step,
                detail: e.to_string(),
            })?;
            for id in model.params.ids().collect::<Vec<_>>() {
                let delta = grads.grad(id).to_vec();
                model.params.accumulate_grad(id, &delta);
            }
            breakdowns.push(breakdown);
        }
        adam.step(&mut model.params)?;
        let record = LossBreakdown::mean(&breakdowns);
        if !record.l_total.is_finite() {
            return Err(PipelineError::NonFiniteLoss { step, detail: format!("{record:?}") });
        }
        observe(step, &record);
        log.push(record);
    }

    if surrogate.params.checksum() != frozen_checksum {
        return Err(PipelineError::Config("frozen surrogate was modified during training".into()));
    }
    Ok(log)
}

/// Writes the per-step loss table as CSV: step,l_hi,l_re,l_a,l_n,l_an,l_total.
pub fn write_loss_csv(log: &[LossBreakdown], w: &mut impl std::io::Write) -> std::io::Result<()> {
    writeln!(w, "step,l_hi,l_re,l_a,l_n,l_an,l_total")?;
    for (i, b) in log.iter().enumerate() {
        writeln!(
            w,
            "{},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9}",
            i, b.l_hi, b.l_re, b.l_a, b.l_n, b.l_an, b.l_total
        )?;
    }
    Ok(())
}

/// Hide/reveal every pair and score stego-vs-cover and revealed-vs-secret.
/// The revealed secret comes from the re-parsed stego stream, so
/// quantization effects are included.
pub fn evaluate_pairs<S: Scalar>(
    model: &MragModel<S>,
    pairs: &[TrainPair],
    detection_accuracy: Option<f64>,
) -> Result<MetricsReport, PipelineError> {
    let metrics: Vec<PairMetrics> = pairs
        .par_iter()
        .map(|pair| -> Result<PairMetrics, PipelineError> {
            let bundle = model.hide(&pair.cover, &pair.secret)?;
            let bytes = jpeg::encode(&bundle.stego)?;
            let stego = jpeg::parse(&bytes)?;
            let cover_px = jpeg::decode_pixels(&pair.cover);
            let stego_px = jpeg::decode_pixels(&stego);
            let revealed = model.reveal(&stego)?;
            Ok(PairMetrics {
                stego_psnr: psnr(&cover_px, &stego_px)?,
                stego_ssim: ssim(&cover_px, &stego_px)?,
                stego_apd: apd(&cover_px, &stego_px)?,
                revealed_psnr: psnr(&pair.secret, &revealed)?,
                revealed_ssim: ssim(&pair.secret, &revealed)?,
                revealed_apd: apd(&pair.secret, &revealed)?,
            })
        })
        .collect::<Result<_, _>>()?;
    Ok(MetricsReport::from_pairs(metrics, detection_accuracy))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::jpeg::compress_rgb;
    use crate::model::MragConfig;
    use crate::surrogate::{pretrain_surrogate, standin_stego};

    pub(crate) fn desk_pairs(n: usize, size: usize, seed: u64) -> Vec<TrainPair> {
        let mut rng = DetRng::new(seed);
        (0..n)
            .map(|_| {
                let mut mk = || {
                    let mut img = Rgb8Image::filled(size, size, [0, 0, 0]);
                    let (cx, cy) =
                        (rng.uniform() * size as f64, rng.uniform() * size as f64);
                    let (soft, phase) = (rng.uniform() * 8.0 + 4.0, rng.uniform() * 6.0);
                    for y in 0..size {
                        for x in 0..size {
                            let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                            let v = |k: f64| {
                                (128.0 + 85.0 * ((d / soft + phase + k).sin())).clamp(0.0, 255.0)
                                    as u8
                            };
                            img.set_pixel(x, y, [v(0.0), v(2.1), v(4.2)]);
                        }
                    }
                    img
                };
                TrainPair { cover: compress_rgb(&mk(), 75).unwrap(), secret: mk() }
            })
            .collect()
    }

    #[test]
    fn short_training_is_deterministic_and_logged() {
        let pairs = desk_pairs(16, 16, 42);
        let standins: Vec<(JpegImage, JpegImage)> = pairs
            .iter()
            .enumerate()
            .map(|(i, p)| (p.cover.clone(), standin_stego(&p.cover, 0.1, i as u64).unwrap()))
            .collect();
        let cfg = TrainConfig { steps: 3, seed: 5, ..TrainConfig::default() };
        let (surrogate, _) = pretrain_surrogate::<f32>(&standins, 1, &cfg).unwrap();

        let run = || {
            let mut model: MragModel<f32> = MragModel::new(MragConfig::new(16, 16), 5).unwrap();
            let log = train(&mut model, &surrogate, &pairs, &cfg).unwrap();
            (log, model.params.checksum())
        };
        let (log_a, sum_a) = run();
        let (log_b, sum_b) = run();
        assert_eq!(log_a.len(), 3);
        assert_eq!(sum_a, sum_b, "training must be bit-deterministic");
        for (a, b) in log_a.iter().zip(&log_b) {
            assert_eq!(a.l_total, b.l_total);
        }
        // step-0 loss of an identity model: l_hi = 0, l_an = -1 exactly
        assert_eq!(log_a[0].l_hi, 0.0);
        assert!((log_a[0].l_a - 1.0).abs() < 1e-6);
        assert!(log_a[0].l_n.abs() < 1e-9);
        assert!(log_a[0].l_re > 0.0);
    }

    #[test]
    fn training_requires_enough_pairs_and_a_trained_surrogate() {
        let pairs = desk_pairs(4, 16, 43);
        let cfg = TrainConfig { steps: 1, ..TrainConfig::default() };
        let mut model: MragModel<f32> = MragModel::new(MragConfig::new(16, 16), 6).unwrap();
        let untrained = Surrogate::<f32>::new(1);
        assert!(train(&mut model, &untrained, &pairs, &cfg).is_err());
        let eight = desk_pairs(8, 16, 44);
        assert!(train(&mut model, &untrained, &eight, &cfg).is_err());
    }

    #[test]
    fn loss_csv_layout() {
        let log = vec![LossBreakdown::new(0.1, 0.2, 0.9, 0.05)];
        let mut buf = Vec::new();
        write_loss_csv(&log, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "step,l_hi,l_re,l_a,l_n,l_an,l_total");
        assert!(lines.next().unwrap().starts_with("0,0.1"));
    }
}
