//! The full hiding/revealing network: local-range coupling over coarse
//! maps, global-range coupling over sub-band maps, and an adaptive fusion
//! stack of mixer + coupling stages.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{PipelineError, TensorError};
use crate::freq::{
    cfd, cover_coarse, ffd_perm, inverse_cfd_cover, inverse_cfd_secret, CoarseMaps,
    COARSE_CHANNELS, FINE_CHANNELS,
};
use crate::image8::Rgb8Image;
use crate::inn::{CouplingLayer, DenseBlock, InvConv1x1, Subnet, TransformerSubnet};
use crate::jpeg::JpegImage;
use crate::rng::DetRng;
use crate::scalar::Scalar;
use crate::tensor::graph::{Graph, IndexPerm, Var};
use crate::tensor::param::ParamStore;
use crate::tensor::Tensor;

/// Channels entering the fusion stack: local output (6) + global output (6).
pub const FUSION_CHANNELS: usize = 2 * COARSE_CHANNELS;
/// Stego coarse channels taken from the fusion output.
pub const STEGO_CHANNELS: usize = 3;
/// Remaining fusion output channels, zeroed at reveal time.
pub const RESIDUAL_CHANNELS: usize = FUSION_CHANNELS - STEGO_CHANNELS;

pub const MODEL_MAGIC: &[u8; 4] = b"MRAG";

#[derive(Debug, Clone)]
pub struct MragConfig {
    /// Image geometry the model is built for (positional embeddings bind
    /// the global branch to one token grid).
    pub height: usize,
    pub width: usize,
    /// Coupling layers in the adaptive fusion module (1..=4).
    pub fusion_layers: usize,
    /// Ablation switches; both on by default.
    pub local_branch: bool,
    pub global_branch: bool,
}

impl MragConfig {
    pub fn new(height: usize, width: usize) -> Self {
        MragConfig { height, width, fusion_layers: 3, local_branch: true, global_branch: true }
    }

    pub fn with_fusion_layers(mut self, n: usize) -> Self {
        self.fusion_layers = n;
        self
    }

    fn validate(&self) -> Result<(), PipelineError> {
        if self.height == 0 || self.width == 0 || self.height % 8 != 0 || self.width % 8 != 0 {
            return Err(PipelineError::Config(format!(
                "model geometry {}x{} must be positive multiples of 8",
                self.width, self.height
            )));
        }
        if !(1..=4).contains(&self.fusion_layers) {
            return Err(PipelineError::Config(format!(
                "fusion_layers {} outside 1..=4",
                self.fusion_layers
            )));
        }
        Ok(())
    }
}

struct FusionStage {
    mixer: InvConv1x1,
    coupling: CouplingLayer,
}

/// All learnable state plus the index permutation caches.
pub struct MragModel<S> {
    pub config: MragConfig,
    pub params: ParamStore<S>,
    local: Option<CouplingLayer>,
    global: Option<CouplingLayer>,
    fusion: Vec<FusionStage>,
    perm: IndexPerm,
}

impl<S: Scalar> MragModel<S> {
    /// Fresh model: all coupling subnets end in zero-initialized layers and
    /// the channel mixers start at identity, so the whole forward map is
    /// exactly the identity on day one.
    pub fn new(config: MragConfig, seed: u64) -> Result<Self, PipelineError> {
        config.validate()?;
        let mut ps = ParamStore::new();
        let mut rng = DetRng::new(seed).fork(0x4D52_4147);
        let half = COARSE_CHANNELS / 2;

        let local = config.local_branch.then(|| {
            CouplingLayer::new(
                COARSE_CHANNELS,
                Subnet::Dense(DenseBlock::new(&mut ps, &mut rng, "local.phi", half, half, false)),
                Subnet::Dense(DenseBlock::new(&mut ps, &mut rng, "local.rho", half, half, false)),
                Subnet::Dense(DenseBlock::new(&mut ps, &mut rng, "local.eta", half, half, false)),
            )
        });

        let tokens = (config.height / 8) * (config.width / 8);
        let dim = FINE_CHANNELS / 2;
        let global = config.global_branch.then(|| {
            CouplingLayer::new(
                FINE_CHANNELS,
                Subnet::Transformer(TransformerSubnet::new(&mut ps, &mut rng, "global.phi", dim, tokens)),
                Subnet::Transformer(TransformerSubnet::new(&mut ps, &mut rng, "global.rho", dim, tokens)),
                Subnet::Transformer(TransformerSubnet::new(&mut ps, &mut rng, "global.eta", dim, tokens)),
            )
        });

        let fhalf = FUSION_CHANNELS / 2;
        let fusion = (0..config.fusion_layers)
            .map(|i| {
                let p = format!("fusion{i}");
                FusionStage {
                    mixer: InvConv1x1::new_identity(&mut ps, &format!("{p}.mix"), FUSION_CHANNELS),
                    coupling: CouplingLayer::new(
                        FUSION_CHANNELS,
                        Subnet::Dense(DenseBlock::new(&mut ps, &mut rng, &format!("{p}.phi"), fhalf, fhalf, true)),
                        Subnet::Dense(DenseBlock::new(&mut ps, &mut rng, &format!("{p}.rho"), fhalf, fhalf, true)),
                        Subnet::Dense(DenseBlock::new(&mut ps, &mut rng, &format!("{p}.eta"), fhalf, fhalf, true)),
                    ),
                }
            })
            .collect();

        let perm = ffd_perm(COARSE_CHANNELS, config.height, config.width);
        Ok(MragModel { config, params: ps, local, global, fusion, perm })
    }

    fn fine_shape(&self) -> Vec<usize> {
        vec![FINE_CHANNELS, self.config.height / 8, self.config.width / 8]
    }

    fn coarse_shape(&self) -> Vec<usize> {
        vec![COARSE_CHANNELS, self.config.height, self.config.width]
    }

    fn check_geometry(&self, h: usize, w: usize) -> Result<(), TensorError> {
        if h != self.config.height || w != self.config.width {
            return Err(TensorError::ShapeMismatch(format!(
                "model built for {}x{}, input is {}x{}",
                self.config.width, self.config.height, w, h
            )));
        }
        Ok(())
    }

    /// Forward hiding map on coarse maps: (6,H,W) -> (12,H,W).
    /// Channels [0,3) of the output are the stego coarse map, [3,12) the
    /// residual.
    pub fn forward_maps(&self, g: &mut Graph<S>, x: Var) -> Result<Var, TensorError> {
        let shape = g.shape(x).to_vec();
        match shape.as_slice() {
            [c, h, w] if *c == COARSE_CHANNELS => self.check_geometry(*h, *w)?,
            s => return Err(TensorError::ShapeMismatch(format!("coarse maps expected, got {s:?}"))),
        }
        let local_out = match &self.local {
            Some(c) => c.forward(g, &self.params, x)?,
            None => x,
        };
        let fine = g.gather(x, &self.perm, self.fine_shape())?;
        let fine_out = match &self.global {
            Some(c) => c.forward(g, &self.params, fine)?,
            None => fine,
        };
        let global_out = g.gather(fine_out, &self.perm.inverse(), self.coarse_shape())?;
        let mut y = g.concat(&[local_out, global_out], 0)?;
        for stage in &self.fusion {
            let mixed = stage.mixer.forward(g, &self.params, y)?;
            y = stage.coupling.forward(g, &self.params, mixed)?;
        }
        Ok(y)
    }

    /// Backward revealing map: stego coarse (3,H,W) + residual (9,H,W) ->
    /// reconstructed coarse maps (6,H,W). The two branch pre-images are
    /// averaged.
    pub fn backward_maps(
        &self,
        g: &mut Graph<S>,
        stego_coarse: Var,
        residual: Var,
    ) -> Result<Var, TensorError> {
        match (g.shape(stego_coarse), g.shape(residual)) {
            ([c1, h1, w1], [c2, h2, w2])
                if *c1 == STEGO_CHANNELS && *c2 == RESIDUAL_CHANNELS && h1 == h2 && w1 == w2 =>
            {
                self.check_geometry(*h1, *w1)?;
            }
            (a, b) => {
                return Err(TensorError::ShapeMismatch(format!(
                    "backward_maps expects (3,H,W) and (9,H,W), got {a:?} and {b:?}"
                )))
            }
        }
        let mut z = g.concat(&[stego_coarse, residual], 0)?;
        for stage in self.fusion.iter().rev() {
            z = stage.coupling.inverse(g, &self.params, z)?;
            z = stage.mixer.inverse(g, &self.params, z)?;
        }
        let parts = g.split(z, &[COARSE_CHANNELS, COARSE_CHANNELS], 0)?;
        let x_local = match &self.local {
            Some(c) => c.inverse(g, &self.params, parts[0])?,
            None => parts[0],
        };
        let fine = g.gather(parts[1], &self.perm, self.fine_shape())?;
        let fine_in = match &self.global {
            Some(c) => c.inverse(g, &self.params, fine)?,
            None => fine,
        };
        let x_global = g.gather(fine_in, &self.perm.inverse(), self.coarse_shape())?;
        let sum = g.add(x_local, x_global)?;
        g.mul_scalar(sum, 0.5)
    }

    /// Hides `secret` in `cover`; the stego is a real coefficient-domain
    /// JPEG image reusing the cover's tables.
    pub fn hide(&self, cover: &JpegImage, secret: &Rgb8Image) -> Result<StegoBundle<S>, PipelineError> {
        let maps: CoarseMaps<S> = cfd(cover, secret)?;
        self.check_geometry(maps.height(), maps.width())?;
        let mut g = Graph::new();
        let x = g.constant(maps.tensor());
        let y = self.forward_maps(&mut g, x)?;
        let parts = g.split(y, &[STEGO_CHANNELS, RESIDUAL_CHANNELS], 0)?;
        let stego_coarse = g.value(parts[0]);
        let residual = g.value(parts[1]);
        let stego = inverse_cfd_cover(&stego_coarse, cover)?;
        Ok(StegoBundle { stego, stego_coarse, residual })
    }

    /// Reveals the secret from a stego JPEG, substituting zeros for the
    /// residual channels.
    pub fn reveal(&self, stego: &JpegImage) -> Result<Rgb8Image, PipelineError> {
        self.check_geometry(stego.height, stego.width)?;
        let coarse = cover_coarse::<S>(stego);
        let zeros = Tensor::zeros(vec![RESIDUAL_CHANNELS, stego.height, stego.width]);
        let mut g = Graph::new();
        let s = g.constant(&coarse);
        let r = g.constant(&zeros);
        let x = self.backward_maps(&mut g, s, r)?;
        let secret_part = g.slice(x, 0, STEGO_CHANNELS, 3)?;
        inverse_cfd_secret(&g.value(secret_part))
    }

    pub fn save(&self, w: &mut impl Write) -> Result<(), PipelineError> {
        self.params.save_container(MODEL_MAGIC, w)
    }

    pub fn load(&mut self, r: &mut impl Read) -> Result<(), PipelineError> {
        self.params.load_container(MODEL_MAGIC, r)
    }

    pub fn save_file(&self, path: impl AsRef<Path>) -> Result<(), PipelineError> {
        let mut f = std::fs::File::create(path)?;
        self.save(&mut f)
    }

    pub fn load_file(&mut self, path: impl AsRef<Path>) -> Result<(), PipelineError> {
        let mut f = std::fs::File::open(path)?;
        self.load(&mut f)
    }
}

/// Output of the forward-hiding pass.
#[derive(Debug, Clone)]
pub struct StegoBundle<S> {
    /// Quantized stego image; encodes to a real JPEG stream.
    pub stego: JpegImage,
    /// Unquantized stego coarse channels (3,H,W) as the network produced them.
    pub stego_coarse: Tensor<S>,
    /// The residual channels (9,H,W) before zeroing.
    pub residual: Tensor<S>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::jpeg::{compress_rgb, decode_pixels};

    fn desk_pair(seed: u64, size: usize) -> (JpegImage, Rgb8Image) {
        let mut rng = DetRng::new(seed);
        let mut mk = |soft: f64| {
            let mut img = Rgb8Image::filled(size, size, [0, 0, 0]);
            let (cx, cy) = (rng.uniform() * size as f64, rng.uniform() * size as f64);
            let phase = rng.uniform() * 6.0;
            for y in 0..size {
                for x in 0..size {
                    let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                    let v = |k: f64| {
                        (128.0 + 90.0 * ((d / soft + phase + k).sin())).clamp(0.0, 255.0) as u8
                    };
                    img.set_pixel(x, y, [v(0.0), v(2.0), v(4.0)]);
                }
            }
            img
        };
        let cover = compress_rgb(&mk(11.0), 75).unwrap();
        (cover, mk(7.0))
    }

    #[test]
    fn fresh_model_is_identity_on_stego_channels() {
        let (cover, secret) = desk_pair(1, 16);
        let model: MragModel<f32> = MragModel::new(MragConfig::new(16, 16), 7).unwrap();
        let bundle = model.hide(&cover, &secret).unwrap();
        assert_eq!(bundle.stego.planes, cover.planes, "stego coefficients must equal cover");
        assert_eq!(bundle.residual.shape(), &[9, 16, 16]);
    }

    #[test]
    fn fresh_model_forward_is_duplicated_input() {
        let (cover, secret) = desk_pair(2, 16);
        let model: MragModel<f64> = MragModel::new(MragConfig::new(16, 16), 8).unwrap();
        let maps = cfd::<f64>(&cover, &secret).unwrap();
        let mut g = Graph::new();
        let x = g.constant(maps.tensor());
        let y = model.forward_maps(&mut g, x).unwrap();
        assert_eq!(g.shape(y), &[12, 16, 16]);
        let parts = g.split(y, &[6, 6], 0).unwrap();
        assert_eq!(g.value(parts[0]).data(), maps.tensor().data());
        assert_eq!(g.value(parts[1]).data(), maps.tensor().data());
    }

    #[test]
    fn round_trip_with_true_residual_recovers_maps() {
        let (cover, secret) = desk_pair(3, 16);
        let mut model: MragModel<f32> = MragModel::new(MragConfig::new(16, 16), 9).unwrap();
        randomize_small(&mut model, 10);
        let maps = cfd::<f32>(&cover, &secret).unwrap();
        let mut g = Graph::new();
        let x = g.constant(maps.tensor());
        let y = model.forward_maps(&mut g, x).unwrap();
        let parts = g.split(y, &[3, 9], 0).unwrap();
        let back = model.backward_maps(&mut g, parts[0], parts[1]).unwrap();
        let err = g.value(back).max_abs_diff(&g.value(x));
        assert!(err <= 1e-3, "round trip error {err}");
    }

    #[test]
    fn reveal_of_fresh_model_is_mid_gray() {
        let (cover, secret) = desk_pair(4, 16);
        let model: MragModel<f32> = MragModel::new(MragConfig::new(16, 16), 11).unwrap();
        let bundle = model.hide(&cover, &secret).unwrap();
        let revealed = model.reveal(&bundle.stego).unwrap();
        assert!(revealed.data().iter().all(|&p| p == 128), "zeroed residual through an identity model");
        // determinism
        let again = model.reveal(&bundle.stego).unwrap();
        assert_eq!(revealed.data(), again.data());
    }

    #[test]
    fn stego_bundle_reencodes_exactly() {
        let (cover, secret) = desk_pair(5, 16);
        let mut model: MragModel<f32> = MragModel::new(MragConfig::new(16, 16), 12).unwrap();
        randomize_small(&mut model, 13);
        let bundle = model.hide(&cover, &secret).unwrap();
        let bytes = crate::jpeg::encode(&bundle.stego).unwrap();
        let reparsed = crate::jpeg::parse(&bytes).unwrap();
        assert_eq!(reparsed.planes, bundle.stego.planes);
        let px = decode_pixels(&reparsed);
        assert_eq!(px.width(), 16);
    }

    #[test]
    fn save_load_round_trip_preserves_values() {
        let mut model: MragModel<f32> = MragModel::new(MragConfig::new(16, 16), 14).unwrap();
        randomize_small(&mut model, 15);
        let mut buf = Vec::new();
        model.save(&mut buf).unwrap();
        let mut fresh: MragModel<f32> = MragModel::new(MragConfig::new(16, 16), 99).unwrap();
        fresh.load(&mut buf.as_slice()).unwrap();
        assert_eq!(fresh.params.checksum(), model.params.checksum());
        // wrong structure is rejected
        let mut other: MragModel<f32> =
            MragModel::new(MragConfig::new(16, 16).with_fusion_layers(2), 99).unwrap();
        assert!(other.load(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn config_bounds_checked() {
        assert!(MragModel::<f32>::new(MragConfig::new(12, 16), 1).is_err());
        assert!(MragModel::<f32>::new(MragConfig::new(16, 16).with_fusion_layers(0), 1).is_err());
        assert!(MragModel::<f32>::new(MragConfig::new(16, 16).with_fusion_layers(5), 1).is_err());
    }

    fn randomize_small<S: Scalar>(model: &mut MragModel<S>, seed: u64) {
        let mut rng = DetRng::new(seed);
        for id in model.params.ids().collect::<Vec<_>>() {
            let t = model.params.value_mut(id);
            let shape = t.shape().to_vec();
            *t = Tensor::randn(shape, 0.05, &mut rng);
        }
        // mixers stay in their init class (orthogonal), as training keeps
        // them well-conditioned via the condition monitor
        for stage in &model.fusion {
            let q = crate::inn::invconv::random_orthogonal(FUSION_CHANNELS, &mut rng);
            *model.params.value_mut(stage.mixer.weight) =
                Tensor::from_fn(vec![FUSION_CHANNELS, FUSION_CHANNELS], |i| S::from_f64(q[i]));
        }
    }
}
