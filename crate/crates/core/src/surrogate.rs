//! Surrogate steganalyzer: a small convolutional detector over coefficient
//! maps, the stand-in +-1 embedder used to pretrain it, and detection
//! accuracy scoring.

use crate::error::{PipelineError, TensorError};
use crate::freq::cover_coarse;
use crate::inn::dense::LEAKY_SLOPE;
use crate::jpeg::JpegImage;
use crate::optim::{Adam, TrainConfig};
use crate::rng::DetRng;
use crate::scalar::Scalar;
use crate::tensor::graph::{Graph, Padding, Var};
use crate::tensor::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const SURROGATE_MAGIC: &[u8; 4] = b"MSTG";
pub const FEATURE_DIM: usize = 128;
const WIDTHS: [usize; 4] = [16, 32, 64, 128];
/// Fixed input gain. Dequantized coefficient maps live in roughly
/// [-0.5, 0.5] with most mass near zero; without rescaling, activations are
/// so small that weight decay drowns the data gradient during pretraining.
const INPUT_GAIN: f64 = 32.0;

/// Detector over (3,H,W) dequantized coefficient maps: four
/// conv/leaky/strided-conv blocks, global average pool, a fully connected
/// layer producing the 128-d classified features, and a final fully
/// connected layer to two logits.
pub struct Surrogate<S> {
    pub params: ParamStore<S>,
    blocks: Vec<[(ParamId, ParamId); 2]>,
    fc_feat: (ParamId, ParamId),
    fc_logit: (ParamId, ParamId),
    /// Trained weights loaded or fitted; features from an untrained
    /// instance are refused.
    pub trained: bool,
}

impl<S: Scalar> Surrogate<S> {
    pub fn new(seed: u64) -> Self {
        let mut ps = ParamStore::new();
        let mut rng = DetRng::new(seed).fork(0x5354_4547);
        let mut blocks = Vec::new();
        let mut c_in = 3;
        for (i, &w) in WIDTHS.iter().enumerate() {
            let conv = |ps: &mut ParamStore<S>, rng: &mut DetRng, name: String, ci: usize, co: usize| {
                let std = (2.0 / (ci * 9) as f64).sqrt();
                (
                    ps.add(format!("{name}.weight"), Tensor::randn(vec![co, ci, 3, 3], std, rng)),
                    ps.add(format!("{name}.bias"), Tensor::zeros(vec![co])),
                )
            };
            let a = conv(&mut ps, &mut rng, format!("block{i}.conv1"), c_in, w);
            let b = conv(&mut ps, &mut rng, format!("block{i}.conv2"), w, w);
            blocks.push([a, b]);
            c_in = w;
        }
        let lin = |ps: &mut ParamStore<S>, rng: &mut DetRng, name: &str, i: usize, o: usize| {
            let std = (1.0 / i as f64).sqrt();
            (
                ps.add(format!("{name}.weight"), Tensor::randn(vec![i, o], std, rng)),
                ps.add(format!("{name}.bias"), Tensor::zeros(vec![o])),
            )
        };
        let fc_feat = lin(&mut ps, &mut rng, "fc_feat", WIDTHS[3], FEATURE_DIM);
        let fc_logit = lin(&mut ps, &mut rng, "fc_logit", FEATURE_DIM, 2);
        Surrogate { params: ps, blocks, fc_feat, fc_logit, trained: false }
    }

    /// When `frozen`, weights enter the graph as constants so no gradient
    /// can reach them; the input keeps its gradient path either way.
    fn weights_var(&self, g: &mut Graph<S>, id: ParamId, frozen: bool) -> Var {
        if frozen {
            g.constant(self.params.value(id))
        } else {
            g.param(id, &self.params)
        }
    }

    fn trunk(&self, g: &mut Graph<S>, x: Var, frozen: bool) -> Result<Var, TensorError> {
        let mut h = g.mul_scalar(x, INPUT_GAIN)?;
        for (bi, block) in self.blocks.iter().enumerate() {
            // full-wave rectification in the first block: +-1 flips carry no
            // first-order linear signal, only even-symmetric responses see them
            let slope = if bi == 0 { -1.0 } else { LEAKY_SLOPE };
            let (w1, b1) = block[0];
            let wv = self.weights_var(g, w1, frozen);
            let bv = self.weights_var(g, b1, frozen);
            h = g.conv2d(&[h], wv, Some(bv), 1, Padding::Same)?;
            h = g.leaky_relu(h, slope)?;
            let (w2, b2) = block[1];
            let wv = self.weights_var(g, w2, frozen);
            let bv = self.weights_var(g, b2, frozen);
            h = g.conv2d(&[h], wv, Some(bv), 2, Padding::Same)?;
            h = g.leaky_relu(h, slope)?;
        }
        let pooled = g.global_avg_pool(h)?;
        let row = g.reshape(pooled, vec![1, WIDTHS[3]])?;
        let w = self.weights_var(g, self.fc_feat.0, frozen);
        let b = self.weights_var(g, self.fc_feat.1, frozen);
        let f = g.matmul(row, w)?;
        g.add_bias_rows(f, b)
    }

    /// The (1,128) features before the last fully connected layer.
    pub fn classified_features(
        &self,
        g: &mut Graph<S>,
        x: Var,
        frozen: bool,
    ) -> Result<Var, TensorError> {
        if frozen && !self.trained {
            return Err(TensorError::Invalid(
                "surrogate weights are not trained/loaded".into(),
            ));
        }
        self.trunk(g, x, frozen)
    }

    /// (1,2) logits: index 0 = cover, 1 = stego.
    pub fn logits(&self, g: &mut Graph<S>, x: Var, frozen: bool) -> Result<Var, TensorError> {
        let f = self.trunk(g, x, frozen)?;
        let w = self.weights_var(g, self.fc_logit.0, frozen);
        let b = self.weights_var(g, self.fc_logit.1, frozen);
        let l = g.matmul(f, w)?;
        g.add_bias_rows(l, b)
    }

    /// Hard cover/stego decision on a coefficient map.
    pub fn classify(&self, input: &Tensor<S>) -> Result<bool, TensorError> {
        let mut g = Graph::new();
        let x = g.constant(input);
        let l = self.logits(&mut g, x, true)?;
        let v = g.value(l);
        Ok(v.data()[1] > v.data()[0])
    }

    pub fn save(&self, w: &mut impl std::io::Write) -> Result<(), PipelineError> {
        self.params.save_container(SURROGATE_MAGIC, w)
    }

    pub fn load(&mut self, r: &mut impl std::io::Read) -> Result<(), PipelineError> {
        self.params.load_container(SURROGATE_MAGIC, r)?;
        self.trained = true;
        Ok(())
    }
}

/// Stand-in stego generator: flips +-1 (seeded, equiprobable sign) on
/// `rate` of the nonzero AC coefficients across all planes. DC untouched.
pub fn standin_stego(cover: &JpegImage, rate: f64, seed: u64) -> Result<JpegImage, PipelineError> {
    if !(rate > 0.0 && rate <= 0.2) {
        return Err(PipelineError::Config(format!("embedding rate {rate} outside (0, 0.2]")));
    }
    let mut out = cover.clone();
    let mut sites: Vec<(usize, usize)> = Vec::new();
    for (p, plane) in cover.planes.iter().enumerate() {
        for (i, &c) in plane.coeffs.iter().enumerate() {
            if i % 64 != 0 && c != 0 {
                sites.push((p, i));
            }
        }
    }
    let mut rng = DetRng::new(seed).fork(0x5f31_7374);
    rng.shuffle(&mut sites);
    let count = (rate * sites.len() as f64).round() as usize;
    for &(p, i) in sites.iter().take(count) {
        let v = out.planes[p].coeffs[i];
        let delta = if v >= 1023 {
            -1
        } else if v <= -1023 {
            1
        } else if rng.uniform() < 0.5 {
            -1
        } else {
            1
        };
        out.planes[p].coeffs[i] = v + delta;
    }
    Ok(out)
}

/// Cross-entropy over the two logits, built from stable graph pieces.
fn cross_entropy<S: Scalar>(g: &mut Graph<S>, logits: Var, label: usize) -> Result<Var, TensorError> {
    let v = g.value(logits);
    let m = v.data().iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b.into_f64()));
    let shifted = g.add_scalar(logits, -m)?;
    let e = g.exp(shifted)?;
    let s = g.sum_all(e)?;
    let lse = g.log(s)?;
    let flat = g.reshape(logits, vec![2])?;
    let own = g.slice(flat, 0, label, 1)?;
    let own = g.add_scalar(own, -m)?;
    g.sub(lse, own)
}

/// Binary cross-entropy pretraining on cover / stand-in pairs. Returns the
/// final training accuracy; the returned surrogate is marked trained.
pub fn pretrain_surrogate<S: Scalar>(
    pairs: &[(JpegImage, JpegImage)],
    epochs: usize,
    config: &TrainConfig,
) -> Result<(Surrogate<S>, f64), PipelineError> {
    if pairs.len() < 16 {
        return Err(PipelineError::Data(format!(
            "surrogate pretraining needs at least 16 pairs, got {}",
            pairs.len()
        )));
    }
    let mut samples: Vec<(Tensor<S>, usize)> = Vec::with_capacity(pairs.len() * 2);
    for (cover, stego) in pairs {
        samples.push((cover_coarse::<S>(cover), 0));
        samples.push((cover_coarse::<S>(stego), 1));
    }
    if samples.iter().all(|(_, l)| *l == 0) || samples.iter().all(|(_, l)| *l == 1) {
        return Err(PipelineError::Data("single-class pretraining data".into()));
    }
    let mut surrogate = Surrogate::<S>::new(config.seed);
    let mut adam = Adam::new(config);
    let mut rng = DetRng::new(config.seed).fork(0x7072_6574);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for _epoch in 0..epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(config.batch_size.max(1)) {
            surrogate.params.zero_grads();
            let scale = 1.0 / chunk.len() as f64;
            for &idx in chunk {
                let (x, label) = &samples[idx];
                let mut g = Graph::new();
                let xv = g.constant(x);
                let logits = surrogate.logits(&mut g, xv, false)?;
                let ce = cross_entropy(&mut g, logits, *label)?;
                let scaled = g.mul_scalar(ce, scale)?;
                g.backward(scaled, &mut surrogate.params)?;
            }
            adam.step(&mut surrogate.params)?;
        }
    }
    surrogate.trained = true;
    let correct = samples
        .iter()
        .filter(|(x, label)| surrogate.classify(x).map(|s| s as usize == *label).unwrap_or(false))
        .count();
    let accuracy = correct as f64 / samples.len() as f64;
    Ok((surrogate, accuracy))
}

/// Fraction of correct decisions over covers (expected negative) and
/// stegos (expected positive).
pub fn detection_accuracy<S: Scalar>(
    surrogate: &Surrogate<S>,
    covers: &[Tensor<S>],
    stegos: &[Tensor<S>],
) -> Result<f64, PipelineError> {
    if covers.is_empty() || stegos.is_empty() {
        return Err(PipelineError::Data("detection_accuracy needs non-empty sets".into()));
    }
    let mut correct = 0usize;
    for c in covers {
        if !surrogate.classify(c)? {
            correct += 1;
        }
    }
    for s in stegos {
        if surrogate.classify(s)? {
            correct += 1;
        }
    }
    Ok(correct as f64 / (covers.len() + stegos.len()) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image8::Rgb8Image;
    use crate::jpeg::compress_rgb;

    fn cover(seed: u64, size: usize) -> JpegImage {
        let mut rng = DetRng::new(seed);
        let mut img = Rgb8Image::filled(size, size, [0, 0, 0]);
        let (cx, cy) = (rng.uniform() * size as f64, rng.uniform() * size as f64);
        for y in 0..size {
            for x in 0..size {
                let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                let v = |k: f64| (128.0 + 80.0 * ((d / 7.0 + k).sin())).clamp(0.0, 255.0) as u8;
                img.set_pixel(x, y, [v(0.0), v(1.5), v(3.0)]);
            }
        }
        compress_rgb(&img, 75).unwrap()
    }

    #[test]
    fn standin_touches_expected_fraction_and_no_dc() {
        let c = cover(1, 32);
        let s = standin_stego(&c, 0.1, 5).unwrap();
        let mut nonzero_ac = 0usize;
        let mut changed = 0usize;
        for (pc, ps) in c.planes.iter().zip(&s.planes) {
            for i in 0..pc.coeffs.len() {
                if i % 64 == 0 {
                    assert_eq!(pc.coeffs[i], ps.coeffs[i], "DC must be untouched");
                    continue;
                }
                if pc.coeffs[i] != 0 {
                    nonzero_ac += 1;
                }
                if pc.coeffs[i] != ps.coeffs[i] {
                    changed += 1;
                    assert_eq!((pc.coeffs[i] - ps.coeffs[i]).abs(), 1);
                }
            }
        }
        let expect = 0.1 * nonzero_ac as f64;
        assert!(
            (changed as f64 - expect).abs() <= 0.05 * expect + 1.0,
            "changed {changed}, expected about {expect}"
        );
        // determinism
        let s2 = standin_stego(&c, 0.1, 5).unwrap();
        assert_eq!(s.planes, s2.planes);
        let s3 = standin_stego(&c, 0.1, 6).unwrap();
        assert_ne!(s.planes, s3.planes);
    }

    #[test]
    fn rate_bounds_enforced() {
        let c = cover(2, 16);
        assert!(standin_stego(&c, 0.0, 1).is_err());
        assert!(standin_stego(&c, 0.3, 1).is_err());
    }

    #[test]
    fn features_require_trained_weights_and_are_deterministic() {
        let c = cover(3, 16);
        let x = cover_coarse::<f32>(&c);
        let mut s = Surrogate::<f32>::new(4);
        let mut g = Graph::new();
        let xv = g.constant(&x);
        assert!(s.classified_features(&mut g, xv, true).is_err());
        s.trained = true;
        let f1 = s.classified_features(&mut g, xv, true).unwrap();
        let f2 = s.classified_features(&mut g, xv, true).unwrap();
        assert_eq!(g.shape(f1), &[1, FEATURE_DIM]);
        assert_eq!(g.value(f1).data(), g.value(f2).data());
    }

    #[test]
    fn frozen_features_pass_gradient_to_input_only() {
        let c = cover(5, 16);
        let mut x = cover_coarse::<f32>(&c);
        x.requires_grad = true;
        let mut s = Surrogate::<f32>::new(6);
        s.trained = true;
        let before = s.params.checksum();
        let mut g = Graph::new();
        let xv = g.input(&x);
        let f = s.classified_features(&mut g, xv, true).unwrap();
        let sq = g.mul(f, f).unwrap();
        let loss = g.sum_all(sq).unwrap();
        g.backward(loss, &mut s.params).unwrap();
        let gx = g.input_grad(xv).expect("input gradient");
        assert!(gx.iter().any(|&v| v != 0.0));
        assert!(s.params.ids().all(|id| s.params.grad(id).iter().all(|&v| v == 0.0)));
        assert_eq!(s.params.checksum(), before);
    }

    #[test]
    fn detection_accuracy_contracts() {
        let mut s = Surrogate::<f32>::new(7);
        s.trained = true;
        let c = cover(8, 16);
        let x = cover_coarse::<f32>(&c);
        assert!(detection_accuracy(&s, &[], &[x.clone()]).is_err());
        let acc = detection_accuracy(&s, &[x.clone()], &[x]).unwrap();
        // same input on both sides: exactly one side correct
        assert!((acc - 0.5).abs() < 1e-9);
    }

    #[test]
    fn pretraining_rejects_tiny_datasets() {
        let pairs: Vec<(JpegImage, JpegImage)> = (0..4)
            .map(|i| {
                let c = cover(10 + i, 16);
                let s = standin_stego(&c, 0.1, i).unwrap();
                (c, s)
            })
            .collect();
        let cfg = TrainConfig::default();
        assert!(pretrain_surrogate::<f32>(&pairs, 1, &cfg).is_err());
    }
}
