//! One pre-norm transformer block over the spatial token grid, with a
//! zero-initialized output projection so the subnet starts as zero.

use crate::error::TensorError;
use crate::rng::DetRng;
use crate::scalar::Scalar;
use crate::tensor::graph::{Graph, Var};
use crate::tensor::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

use super::dense::LEAKY_SLOPE;

pub const HEADS: usize = 4;
const MLP_RATIO: usize = 2;

#[derive(Debug, Clone)]
pub struct TransformerSubnet {
    pub dim: usize,
    pub tokens: usize,
    pos: ParamId,
    ln1_gain: ParamId,
    ln1_bias: ParamId,
    ln2_gain: ParamId,
    ln2_bias: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    mlp_w1: ParamId,
    mlp_b1: ParamId,
    mlp_w2: ParamId,
    mlp_b2: ParamId,
    out_proj: ParamId,
    out_bias: ParamId,
}

impl TransformerSubnet {
    /// `tokens` is the (H/8)*(W/8) grid size the positional embedding covers.
    pub fn new<S: Scalar>(
        ps: &mut ParamStore<S>,
        rng: &mut DetRng,
        prefix: &str,
        dim: usize,
        tokens: usize,
    ) -> Self {
        assert!(dim % HEADS == 0, "token dim {dim} not divisible by {HEADS} heads");
        let std = (1.0 / dim as f64).sqrt();
        let hidden = MLP_RATIO * dim;
        let lin = |ps: &mut ParamStore<S>, rng: &mut DetRng, name: &str, i: usize, o: usize| {
            (
                ps.add(format!("{prefix}.{name}.weight"), Tensor::randn(vec![i, o], std, rng)),
                ps.add(format!("{prefix}.{name}.bias"), Tensor::zeros(vec![o])),
            )
        };
        let (wq, bq) = lin(ps, rng, "attn.q", dim, dim);
        let (wk, bk) = lin(ps, rng, "attn.k", dim, dim);
        let (wv, bv) = lin(ps, rng, "attn.v", dim, dim);
        let (wo, bo) = lin(ps, rng, "attn.out", dim, dim);
        let (mlp_w1, mlp_b1) = lin(ps, rng, "mlp.fc1", dim, hidden);
        let (mlp_w2, mlp_b2) = lin(ps, rng, "mlp.fc2", hidden, dim);
        TransformerSubnet {
            dim,
            tokens,
            pos: ps.add(format!("{prefix}.pos"), Tensor::randn(vec![tokens, dim], 0.02, rng)),
            ln1_gain: ps.add(format!("{prefix}.ln1.gain"), Tensor::filled(vec![dim], S::one())),
            ln1_bias: ps.add(format!("{prefix}.ln1.bias"), Tensor::zeros(vec![dim])),
            ln2_gain: ps.add(format!("{prefix}.ln2.gain"), Tensor::filled(vec![dim], S::one())),
            ln2_bias: ps.add(format!("{prefix}.ln2.bias"), Tensor::zeros(vec![dim])),
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
            mlp_w1,
            mlp_b1,
            mlp_w2,
            mlp_b2,
            out_proj: ps.add(format!("{prefix}.out.weight"), Tensor::zeros(vec![dim, dim])),
            out_bias: ps.add(format!("{prefix}.out.bias"), Tensor::zeros(vec![dim])),
        }
    }

    fn linear<S: Scalar>(
        g: &mut Graph<S>,
        ps: &ParamStore<S>,
        x: Var,
        w: ParamId,
        b: ParamId,
    ) -> Result<Var, TensorError> {
        let wv = g.param(w, ps);
        let bv = g.param(b, ps);
        let y = g.matmul(x, wv)?;
        g.add_bias_rows(y, bv)
    }

    /// (C, h, w) -> (C, h, w) with C == dim and h*w == tokens.
    pub fn apply<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        ps: &ParamStore<S>,
        x: Var,
    ) -> Result<Var, TensorError> {
        let shape = g.shape(x).to_vec();
        let [c, h, w] = match shape.as_slice() {
            [c, h, w] => [*c, *h, *w],
            s => {
                return Err(TensorError::ShapeMismatch(format!(
                    "transformer subnet expects (C,h,w), got {s:?}"
                )))
            }
        };
        if c != self.dim || h * w != self.tokens {
            return Err(TensorError::ShapeMismatch(format!(
                "transformer subnet built for dim {} over {} tokens, got ({c},{h},{w})",
                self.dim, self.tokens
            )));
        }
        let flat = g.reshape(x, vec![c, h * w])?;
        let tokens = g.transpose2d(flat)?;
        let pos = g.param(self.pos, ps);
        let t0 = g.add(tokens, pos)?;

        // attention sub-layer
        let ln1g = g.param(self.ln1_gain, ps);
        let ln1b = g.param(self.ln1_bias, ps);
        let a = g.layer_norm(t0, ln1g, ln1b)?;
        let q = Self::linear(g, ps, a, self.wq, self.bq)?;
        let k = Self::linear(g, ps, a, self.wk, self.bk)?;
        let v = Self::linear(g, ps, a, self.wv, self.bv)?;
        let dk = self.dim / HEADS;
        let sizes = vec![dk; HEADS];
        let qh = g.split(q, &sizes, 1)?;
        let kh = g.split(k, &sizes, 1)?;
        let vh = g.split(v, &sizes, 1)?;
        let mut heads = Vec::with_capacity(HEADS);
        let scale = 1.0 / (dk as f64).sqrt();
        for i in 0..HEADS {
            let kt = g.transpose2d(kh[i])?;
            let scores = g.matmul(qh[i], kt)?;
            let scores = g.mul_scalar(scores, scale)?;
            let attn = g.softmax(scores, 1)?;
            heads.push(g.matmul(attn, vh[i])?);
        }
        let merged = g.concat(&heads, 1)?;
        let attn_out = Self::linear(g, ps, merged, self.wo, self.bo)?;
        let t1 = g.add(t0, attn_out)?;

        // MLP sub-layer
        let ln2g = g.param(self.ln2_gain, ps);
        let ln2b = g.param(self.ln2_bias, ps);
        let m = g.layer_norm(t1, ln2g, ln2b)?;
        let m = Self::linear(g, ps, m, self.mlp_w1, self.mlp_b1)?;
        let m = g.leaky_relu(m, LEAKY_SLOPE)?;
        let m = Self::linear(g, ps, m, self.mlp_w2, self.mlp_b2)?;
        let t2 = g.add(t1, m)?;

        let out = Self::linear(g, ps, t2, self.out_proj, self.out_bias)?;
        let back = g.transpose2d(out)?;
        g.reshape(back, vec![c, h, w])
    }

    /// Positional embedding handle (tests permute it to check equivariance).
    pub fn pos_param(&self) -> ParamId {
        self.pos
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_init_output_is_zero() {
        let mut ps = ParamStore::<f32>::new();
        let mut rng = DetRng::new(4);
        let t = TransformerSubnet::new(&mut ps, &mut rng, "g", 8, 16);
        let mut g = Graph::new();
        let x = g.input(&Tensor::randn(vec![8, 4, 4], 1.0, &mut rng));
        let y = t.apply(&mut g, &ps, x).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn token_permutation_equivariance() {
        // permuting token order together with the positional embedding rows
        // permutes the output the same way
        let mut ps = ParamStore::<f64>::new();
        let mut rng = DetRng::new(9);
        let t = TransformerSubnet::new(&mut ps, &mut rng, "g", 8, 16);
        // non-zero output projection so the test sees the whole block
        *ps.value_mut(t.out_proj) = Tensor::randn(vec![8, 8], 0.3, &mut rng);

        let x = Tensor::<f64>::randn(vec![8, 4, 4], 1.0, &mut rng);
        let mut g = Graph::new();
        let xv = g.input(&x);
        let y = t.apply(&mut g, &ps, xv).unwrap();
        let y = g.value(y);

        let mut order: Vec<usize> = (0..16).collect();
        rng.shuffle(&mut order);
        // permute spatial positions of x: token j of x2 = token order[j] of x
        let xd = x.data();
        let x2 = Tensor::<f64>::from_fn(vec![8, 4, 4], |i| {
            let (c, tok) = (i / 16, i % 16);
            xd[c * 16 + order[tok]]
        });
        // permute pos rows identically
        let pos = ps.value(t.pos).clone();
        let mut ps2 = ps.clone();
        let pd = pos.data();
        *ps2.value_mut(t.pos) =
            Tensor::from_fn(vec![16, 8], |i| pd[order[i / 8] * 8 + i % 8]);

        let mut g2 = Graph::new();
        let xv2 = g2.input(&x2);
        let y2 = t.apply(&mut g2, &ps2, xv2).unwrap();
        let y2 = g2.value(y2);

        let yd = y.data();
        let y2d = y2.data();
        for c in 0..8 {
            for tok in 0..16 {
                let a = y2d[c * 16 + tok];
                let b = yd[c * 16 + order[tok]];
                assert!((a - b).abs() < 1e-9, "c={c} tok={tok}: {a} vs {b}");
            }
        }
    }
}
