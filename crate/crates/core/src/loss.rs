//! Training losses: hiding, revealing, and the angle/norm feature loss
//! computed on the surrogate's classified features.

use serde::{Deserialize, Serialize};

use crate::error::{PipelineError, TensorError};
use crate::freq::{cfd, cover_coarse, secret_normalized};
use crate::image8::Rgb8Image;
use crate::jpeg::JpegImage;
use crate::model::{MragModel, RESIDUAL_CHANNELS, STEGO_CHANNELS};
use crate::scalar::Scalar;
use crate::surrogate::Surrogate;
use crate::tensor::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Scalar losses of one batch (or one sample). The derived fields keep the
/// defining identities exact: `l_an = -l_a + l_n`, `l_total = l_hi + l_re + l_an`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_hi: f64,
    pub l_re: f64,
    pub l_a: f64,
    pub l_n: f64,
    pub l_an: f64,
    pub l_total: f64,
}

impl LossBreakdown {
    pub fn new(l_hi: f64, l_re: f64, l_a: f64, l_n: f64) -> Self {
        let l_an = -l_a + l_n;
        LossBreakdown { l_hi, l_re, l_a, l_n, l_an, l_total: l_hi + l_re + l_an }
    }

    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        LossBreakdown::new(
            items.iter().map(|b| b.l_hi).sum::<f64>() / n,
            items.iter().map(|b| b.l_re).sum::<f64>() / n,
            items.iter().map(|b| b.l_a).sum::<f64>() / n,
            items.iter().map(|b| b.l_n).sum::<f64>() / n,
        )
    }
}

/// Cosine similarity and mean squared error between two feature vectors.
/// Zero-norm features are an error (the angle would be undefined).
pub fn angle_norm_terms<S: Scalar>(
    g: &mut Graph<S>,
    f_c: Var,
    f_s: Var,
) -> Result<(Var, Var), TensorError> {
    let n = g.value(f_c).numel();
    if g.value(f_s).numel() != n {
        return Err(TensorError::ShapeMismatch("feature vectors differ in length".into()));
    }
    let a = g.reshape(f_c, vec![n])?;
    let b = g.reshape(f_s, vec![n])?;
    let prod = g.mul(a, b)?;
    let dot = g.sum_all(prod)?;
    let aa = g.mul(a, a)?;
    let bb = g.mul(b, b)?;
    let sa = g.sum_all(aa)?;
    let sb = g.sum_all(bb)?;
    if g.scalar_value(sa) == S::zero() || g.scalar_value(sb) == S::zero() {
        return Err(TensorError::Invalid("zero-norm classified features".into()));
    }
    let na = g.sqrt(sa)?;
    let nb = g.sqrt(sb)?;
    let denom = g.mul(na, nb)?;
    let l_a = g.div(dot, denom)?;
    let l_n = g.mse(a, b)?;
    Ok((l_a, l_n))
}

/// Convenience over plain vectors; returns (l_a, l_n, l_an).
pub fn angle_norm_loss<S: Scalar>(
    f_c: &Tensor<S>,
    f_s: &Tensor<S>,
) -> Result<(f64, f64, f64), TensorError> {
    let mut g = Graph::new();
    let a = g.constant(f_c);
    let b = g.constant(f_s);
    let (l_a, l_n) = angle_norm_terms(&mut g, a, b)?;
    let la = g.scalar_value(l_a).into_f64();
    let ln = g.scalar_value(l_n).into_f64();
    Ok((la, ln, -la + ln))
}

/// Graph handles for one sample's losses.
pub struct SampleLosses {
    pub l_hi: Var,
    pub l_re: Var,
    pub l_a: Var,
    pub l_n: Var,
    pub l_total: Var,
}

impl SampleLosses {
    pub fn breakdown<S: Scalar>(&self, g: &Graph<S>) -> LossBreakdown {
        LossBreakdown::new(
            g.scalar_value(self.l_hi).into_f64(),
            g.scalar_value(self.l_re).into_f64(),
            g.scalar_value(self.l_a).into_f64(),
            g.scalar_value(self.l_n).into_f64(),
        )
    }
}

/// Builds the full training loss for one cover/secret pair:
/// hide, reveal with zeroed residual, and the feature loss between the
/// cover and stego coefficient maps through the frozen surrogate.
pub fn sample_losses<S: Scalar>(
    g: &mut Graph<S>,
    model: &MragModel<S>,
    surrogate: &Surrogate<S>,
    cover: &JpegImage,
    secret: &Rgb8Image,
) -> Result<SampleLosses, PipelineError> {
    let maps = cfd::<S>(cover, secret)?;
    let (h, w) = (maps.height(), maps.width());
    let x = g.constant(maps.tensor());
    let y = model.forward_maps(g, x)?;
    let parts = g.split(y, &[STEGO_CHANNELS, RESIDUAL_CHANNELS], 0)?;
    let stego_coarse = parts[0];

    let cover_ch = cover_coarse::<S>(cover);
    let cover_var = g.constant(&cover_ch);
    let l_hi = g.mse(stego_coarse, cover_var)?;

    let zeros = Tensor::zeros(vec![RESIDUAL_CHANNELS, h, w]);
    let zeros_var = g.constant(&zeros);
    let xhat = model.backward_maps(g, stego_coarse, zeros_var)?;
    let secret_ch = g.slice(xhat, 0, STEGO_CHANNELS, 3)?;
    let revealed_norm = g.block_dct8(secret_ch, true)?;
    let secret_norm = secret_normalized::<S>(secret);
    let secret_var = g.constant(&secret_norm);
    let l_re = g.mse(revealed_norm, secret_var)?;

    let f_c = surrogate.classified_features(g, cover_var, true)?;
    let f_s = surrogate.classified_features(g, stego_coarse, true)?;
    let (l_a, l_n) = angle_norm_terms(g, f_c, f_s)?;

    let l_an = g.sub(l_n, l_a)?;
    let fidelity = g.add(l_hi, l_re)?;
    let l_total = g.add(fidelity, l_an)?;
    Ok(SampleLosses { l_hi, l_re, l_a, l_n, l_total })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vector(vals: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![vals.len()], vals.to_vec()).unwrap()
    }

    #[test]
    fn identical_features_give_minus_one() {
        let f = vector(&[0.5, -1.0, 2.0]);
        let (l_a, l_n, l_an) = angle_norm_loss(&f, &f).unwrap();
        assert!((l_a - 1.0).abs() < 1e-12);
        assert_eq!(l_n, 0.0);
        assert!((l_an - (-1.0)).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_unit_features() {
        // f_c = (1,0), f_s = (0,1): l_a = 0, l_n = (1+1)/2 = 1, l_an = 1
        let (l_a, l_n, l_an) =
            angle_norm_loss(&vector(&[1.0, 0.0]), &vector(&[0.0, 1.0])).unwrap();
        assert!(l_a.abs() < 1e-12);
        assert!((l_n - 1.0).abs() < 1e-12);
        assert!((l_an - 1.0).abs() < 1e-12);
    }

    #[test]
    fn aligned_but_scaled_features_pay_norm_loss() {
        // f_c = (1,0), f_s = (2,0): l_a = 1, l_n = 0.5, l_an = -0.5
        let (l_a, l_n, l_an) =
            angle_norm_loss(&vector(&[1.0, 0.0]), &vector(&[2.0, 0.0])).unwrap();
        assert!((l_a - 1.0).abs() < 1e-12);
        assert!((l_n - 0.5).abs() < 1e-12);
        assert!((l_an - (-0.5)).abs() < 1e-12);
    }

    #[test]
    fn zero_norm_features_error() {
        assert!(angle_norm_loss(&vector(&[0.0, 0.0]), &vector(&[1.0, 0.0])).is_err());
    }

    #[test]
    fn breakdown_identities_are_exact() {
        let b = LossBreakdown::new(0.125, 0.0625, 0.75, 0.5);
        assert_eq!(b.l_an, -b.l_a + b.l_n);
        assert_eq!(b.l_total, b.l_hi + b.l_re + b.l_an);
        let m = LossBreakdown::mean(&[b, LossBreakdown::new(0.5, 0.25, 0.5, 0.25)]);
        assert_eq!(m.l_an, -m.l_a + m.l_n);
        assert_eq!(m.l_total, m.l_hi + m.l_re + m.l_an);
    }

    #[test]
    fn descending_on_l_an_pulls_features_together() {
        // gradient descent on f_s alone shrinks ||f_s - f_c|| monotonically
        let f_c = vector(&[1.0, -0.5, 0.25, 2.0]);
        let mut f_s = vector(&[-0.4, 0.9, -1.2, 0.3]);
        let mut prev = f64::INFINITY;
        for _ in 0..50 {
            let mut g = Graph::new();
            let mut fs_t = f_s.clone();
            fs_t.requires_grad = true;
            let a = g.constant(&f_c);
            let b = g.input(&fs_t);
            let (l_a, l_n) = angle_norm_terms(&mut g, a, b).unwrap();
            let l_an = g.sub(l_n, l_a).unwrap();
            let mut dummy = crate::tensor::param::ParamStore::new();
            g.backward(l_an, &mut dummy).unwrap();
            let grad = g.input_grad(b).unwrap().to_vec();
            let dist: f64 = f_s
                .data()
                .iter()
                .zip(f_c.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            assert!(dist < prev + 1e-12, "distance must not increase: {dist} vs {prev}");
            prev = dist;
            let lr = 0.2;
            let updated: Vec<f64> =
                f_s.data().iter().zip(&grad).map(|(v, g)| v - lr * g).collect();
            f_s = vector(&updated);
        }
        assert!(prev < 0.5, "features should approach the target, final distance {prev}");
    }
}
