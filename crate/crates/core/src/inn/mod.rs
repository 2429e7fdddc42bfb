//! Invertible building blocks: affine coupling layers over interchangeable
//! subnets, and the invertible 1x1 channel mixer.

pub mod dense;
pub mod invconv;
pub mod transformer;

pub use dense::{ChannelAttention, DenseBlock};
pub use invconv::InvConv1x1;
pub use transformer::TransformerSubnet;

use crate::error::TensorError;
use crate::scalar::Scalar;
use crate::tensor::graph::{Graph, Var};
use crate::tensor::param::ParamStore;

/// Default amplitude bound for the coupling scale exponent.
pub const SCALE_CLAMP: f64 = 2.0;

/// The conditioning networks a coupling layer can use.
#[derive(Debug, Clone)]
pub enum Subnet {
    Dense(DenseBlock),
    Transformer(TransformerSubnet),
}

impl Subnet {
    pub fn apply<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        ps: &ParamStore<S>,
        x: Var,
    ) -> Result<Var, TensorError> {
        match self {
            Subnet::Dense(d) => d.apply(g, ps, x),
            Subnet::Transformer(t) => t.apply(g, ps, x),
        }
    }
}

/// Affine coupling over a channel split x = (u, l):
///   u_o = u + phi(l)
///   l_o = l * exp(s) + eta(u_o),  s = clamp * tanh(rho(u_o))
/// The tanh bound keeps |s| <= clamp so exp never overflows, and the layer
/// stays algebraically invertible.
#[derive(Debug, Clone)]
pub struct CouplingLayer {
    pub phi: Subnet,
    pub rho: Subnet,
    pub eta: Subnet,
    pub channels: usize,
    pub clamp: f64,
}

impl CouplingLayer {
    pub fn new(channels: usize, phi: Subnet, rho: Subnet, eta: Subnet) -> Self {
        assert!(channels % 2 == 0, "coupling needs an even channel count");
        CouplingLayer { phi, rho, eta, channels, clamp: SCALE_CLAMP }
    }

    fn halves<S: Scalar>(&self, g: &mut Graph<S>, x: Var) -> Result<(Var, Var), TensorError> {
        let shape = g.shape(x).to_vec();
        match shape.as_slice() {
            [c, _, _] if *c == self.channels => {}
            s => {
                return Err(TensorError::ShapeMismatch(format!(
                    "coupling built for {} channels, got {s:?}",
                    self.channels
                )))
            }
        }
        let half = self.channels / 2;
        let parts = g.split(x, &[half, half], 0)?;
        Ok((parts[0], parts[1]))
    }

    fn scale<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        ps: &ParamStore<S>,
        u_o: Var,
        negate: bool,
    ) -> Result<Var, TensorError> {
        let raw = self.rho.apply(g, ps, u_o)?;
        let t = g.tanh(raw)?;
        let s = g.mul_scalar(t, if negate { -self.clamp } else { self.clamp })?;
        g.exp(s)
    }

    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        ps: &ParamStore<S>,
        x: Var,
    ) -> Result<Var, TensorError> {
        let (u, l) = self.halves(g, x)?;
        let shift_u = self.phi.apply(g, ps, l)?;
        let u_o = g.add(u, shift_u)?;
        let es = self.scale(g, ps, u_o, false)?;
        let scaled = g.mul(l, es)?;
        let shift_l = self.eta.apply(g, ps, u_o)?;
        let l_o = g.add(scaled, shift_l)?;
        g.concat(&[u_o, l_o], 0)
    }

    pub fn inverse<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        ps: &ParamStore<S>,
        y: Var,
    ) -> Result<Var, TensorError> {
        let (u_o, l_o) = self.halves(g, y)?;
        let shift_l = self.eta.apply(g, ps, u_o)?;
        let centered = g.sub(l_o, shift_l)?;
        let es_inv = self.scale(g, ps, u_o, true)?;
        let l = g.mul(centered, es_inv)?;
        let shift_u = self.phi.apply(g, ps, l)?;
        let u = g.sub(u_o, shift_u)?;
        g.concat(&[u, l], 0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::DetRng;
    use crate::tensor::Tensor;

    fn dense_coupling<S: Scalar>(
        ps: &mut ParamStore<S>,
        rng: &mut DetRng,
        channels: usize,
    ) -> CouplingLayer {
        let half = channels / 2;
        CouplingLayer::new(
            channels,
            Subnet::Dense(DenseBlock::new(ps, rng, "c.phi", half, half, false)),
            Subnet::Dense(DenseBlock::new(ps, rng, "c.rho", half, half, false)),
            Subnet::Dense(DenseBlock::new(ps, rng, "c.eta", half, half, false)),
        )
    }

    fn randomize<S: Scalar>(ps: &mut ParamStore<S>, rng: &mut DetRng, std: f64) {
        for id in ps.ids().collect::<Vec<_>>() {
            let t = ps.value_mut(id);
            let shape = t.shape().to_vec();
            *t = Tensor::randn(shape, std, rng);
        }
    }

    #[test]
    fn zero_init_coupling_is_identity() {
        let mut ps = ParamStore::<f32>::new();
        let mut rng = DetRng::new(11);
        let c = dense_coupling(&mut ps, &mut rng, 6);
        let mut g = Graph::new();
        let x = g.input(&Tensor::randn(vec![6, 8, 8], 1.0, &mut rng));
        let y = c.forward(&mut g, &ps, x).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn forward_inverse_round_trip_f32() {
        let mut ps = ParamStore::<f32>::new();
        let mut rng = DetRng::new(12);
        let c = dense_coupling(&mut ps, &mut rng, 6);
        randomize(&mut ps, &mut rng, 0.1);
        let mut g = Graph::new();
        let x = g.input(&Tensor::randn(vec![6, 8, 8], 1.0, &mut rng));
        let y = c.forward(&mut g, &ps, x).unwrap();
        let back = c.inverse(&mut g, &ps, y).unwrap();
        assert!(g.value(back).max_abs_diff(&g.value(x)) <= 1e-4);
        let fwd2 = c.forward(&mut g, &ps, back).unwrap();
        assert!(g.value(fwd2).max_abs_diff(&g.value(y)) <= 1e-4);
    }

    #[test]
    fn scalar_example_constant_subnets() {
        // phi == 3, rho == 0, eta == 1 on a 2-channel coupling:
        // (u, l) = (2, 5) -> (u_o, l_o) = (5, 6); inverse restores (2, 5).
        let mut ps = ParamStore::<f64>::new();
        let mut rng = DetRng::new(13);
        let c = dense_coupling(&mut ps, &mut rng, 2);
        for idx in ps.ids().collect::<Vec<_>>() {
            let t = ps.value_mut(idx);
            let shape = t.shape().to_vec();
            *t = Tensor::zeros(shape);
        }
        // constant subnet outputs come from the final conv bias
        let set_bias = |ps: &mut ParamStore<f64>, name: &str, v: f64| {
            let id = ps
                .ids()
                .find(|&i| ps.name(i) == name)
                .expect("bias parameter");
            *ps.value_mut(id) = Tensor::filled(vec![1], v);
        };
        set_bias(&mut ps, "c.phi.conv5.bias", 3.0);
        set_bias(&mut ps, "c.eta.conv5.bias", 1.0);

        let mut g = Graph::new();
        let x = g.input(&Tensor::new(vec![2, 1, 1], vec![2.0, 5.0]).unwrap());
        let y = c.forward(&mut g, &ps, x).unwrap();
        assert_eq!(g.value(y).data(), &[5.0, 6.0]);
        let back = c.inverse(&mut g, &ps, y).unwrap();
        assert!(g.value(back).max_abs_diff(&g.value(x)) < 1e-12);
    }

    #[test]
    fn odd_channel_count_errors() {
        let mut ps = ParamStore::<f32>::new();
        let mut rng = DetRng::new(14);
        let c = dense_coupling(&mut ps, &mut rng, 6);
        let mut g = Graph::new();
        let x = g.input(&Tensor::zeros(vec![5, 8, 8]));
        assert!(c.forward(&mut g, &ps, x).is_err());
    }
}
