//! Five-layer dense convolutional subnet, optionally fronted by a gated
//! 1x1 convolution with channel attention.

use crate::error::TensorError;
use crate::rng::DetRng;
use crate::scalar::Scalar;
use crate::tensor::graph::{Graph, Padding, Var};
use crate::tensor::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.2;
pub const GROWTH: usize = 32;

#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ConvLayer {
    fn new<S: Scalar>(
        ps: &mut ParamStore<S>,
        rng: &mut DetRng,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        zero_init: bool,
    ) -> Self {
        let weight = if zero_init {
            Tensor::zeros(vec![c_out, c_in, k, k])
        } else {
            let std = (2.0 / (c_in * k * k) as f64).sqrt();
            Tensor::randn(vec![c_out, c_in, k, k], std, rng)
        };
        ConvLayer {
            weight: ps.add(format!("{name}.weight"), weight),
            bias: ps.add(format!("{name}.bias"), Tensor::zeros(vec![c_out])),
        }
    }
}

/// Squeeze-style gate: global average pool -> C/4 -> C -> sigmoid, applied
/// to a parallel 1x1 convolution of the input.
#[derive(Debug, Clone)]
pub struct ChannelAttention {
    conv: ConvLayer,
    gate_w1: ParamId,
    gate_b1: ParamId,
    gate_w2: ParamId,
    gate_b2: ParamId,
    channels: usize,
}

impl ChannelAttention {
    pub fn new<S: Scalar>(
        ps: &mut ParamStore<S>,
        rng: &mut DetRng,
        prefix: &str,
        channels: usize,
    ) -> Self {
        let hidden = (channels / 4).max(1);
        let conv = ConvLayer::new(ps, rng, &format!("{prefix}.conv"), channels, channels, 1, false);
        let std1 = (1.0 / channels as f64).sqrt();
        let std2 = (1.0 / hidden as f64).sqrt();
        ChannelAttention {
            conv,
            gate_w1: ps.add(format!("{prefix}.gate.w1"), Tensor::randn(vec![channels, hidden], std1, rng)),
            gate_b1: ps.add(format!("{prefix}.gate.b1"), Tensor::zeros(vec![hidden])),
            gate_w2: ps.add(format!("{prefix}.gate.w2"), Tensor::randn(vec![hidden, channels], std2, rng)),
            gate_b2: ps.add(format!("{prefix}.gate.b2"), Tensor::zeros(vec![channels])),
            channels,
        }
    }

    pub fn apply<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        ps: &ParamStore<S>,
        x: Var,
    ) -> Result<Var, TensorError> {
        let w = g.param(self.conv.weight, ps);
        let b = g.param(self.conv.bias, ps);
        let mixed = g.conv2d(&[x], w, Some(b), 1, Padding::Same)?;

        let pooled = g.global_avg_pool(x)?;
        let row = g.reshape(pooled, vec![1, self.channels])?;
        let w1 = g.param(self.gate_w1, ps);
        let b1 = g.param(self.gate_b1, ps);
        let h = g.matmul(row, w1)?;
        let h = g.add_bias_rows(h, b1)?;
        let h = g.leaky_relu(h, LEAKY_SLOPE)?;
        let w2 = g.param(self.gate_w2, ps);
        let b2 = g.param(self.gate_b2, ps);
        let gate = g.matmul(h, w2)?;
        let gate = g.add_bias_rows(gate, b2)?;
        let gate = g.sigmoid(gate)?;
        let gate = g.reshape(gate, vec![self.channels])?;
        g.scale_channels(mixed, gate)
    }
}

/// Dense block: each 3x3 layer consumes the input plus every previous
/// layer's output; the final layer maps to `c_out` and starts at zero so
/// the subnet output is exactly zero at initialization.
#[derive(Debug, Clone)]
pub struct DenseBlock {
    attention: Option<ChannelAttention>,
    layers: Vec<ConvLayer>,
    pub c_in: usize,
    pub c_out: usize,
}

impl DenseBlock {
    pub fn new<S: Scalar>(
        ps: &mut ParamStore<S>,
        rng: &mut DetRng,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        with_attention: bool,
    ) -> Self {
        let attention = with_attention
            .then(|| ChannelAttention::new(ps, rng, &format!("{prefix}.attn"), c_in));
        let mut layers = Vec::with_capacity(5);
        for i in 0..5 {
            let lin = c_in + i * GROWTH;
            let (lout, zero) = if i == 4 { (c_out, true) } else { (GROWTH, false) };
            layers.push(ConvLayer::new(ps, rng, &format!("{prefix}.conv{}", i + 1), lin, lout, 3, zero));
        }
        DenseBlock { attention, layers, c_in, c_out }
    }

    pub fn apply<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        ps: &ParamStore<S>,
        x: Var,
    ) -> Result<Var, TensorError> {
        let first = match &self.attention {
            Some(attn) => attn.apply(g, ps, x)?,
            None => x,
        };
        let mut feats = vec![first];
        for (i, layer) in self.layers.iter().enumerate() {
            let w = g.param(layer.weight, ps);
            let b = g.param(layer.bias, ps);
            let y = g.conv2d(&feats, w, Some(b), 1, Padding::Same)?;
            if i + 1 < self.layers.len() {
                let y = g.leaky_relu(y, LEAKY_SLOPE)?;
                feats.push(y);
            } else {
                return Ok(y);
            }
        }
        unreachable!("final layer returns")
    }
}
