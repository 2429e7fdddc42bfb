//! Reverse-mode differentiation over a recorded operation tape.
//!
//! Values are computed eagerly as operations are recorded; `backward` walks
//! the tape in reverse and accumulates parameter gradients. Every operation
//! checks its output for non-finite values, so NaN/Inf surfaces at the op
//! that produced it instead of at the end of a training step.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::TensorError;
use crate::freq::dct8;
use crate::scalar::Scalar;
use crate::tensor::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to one node of the graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(u32);

impl Var {
    #[inline]
    fn i(self) -> usize {
        self.0 as usize
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Shared index permutation; `fwd[i]` is the source index of output element
/// `i`, `inv` is the inverse map.
#[derive(Debug, Clone)]
pub struct IndexPerm {
    pub fwd: Arc<Vec<u32>>,
    pub inv: Arc<Vec<u32>>,
}

impl IndexPerm {
    pub fn new(fwd: Vec<u32>) -> Self {
        let mut inv = vec![0u32; fwd.len()];
        for (i, &s) in fwd.iter().enumerate() {
            inv[s as usize] = i as u32;
        }
        IndexPerm { fwd: Arc::new(fwd), inv: Arc::new(inv) }
    }

    /// The inverse permutation (shares storage).
    pub fn inverse(&self) -> IndexPerm {
        IndexPerm { fwd: self.inv.clone(), inv: self.fwd.clone() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Same,
    None,
}

#[derive(Debug, Clone)]
enum Op {
    Input { requires_grad: bool },
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var, f64),
    MulScalar(Var, f64),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Tanh(Var),
    Sigmoid(Var),
    LeakyRelu(Var, f64),
    Matmul(Var, Var),
    Transpose2d(Var),
    MatInverse(Var),
    Conv2d { inputs: Vec<Var>, kernel: Var, bias: Option<Var>, stride: usize, padding: Padding },
    LayerNorm { x: Var, gain: Var, bias: Var },
    Softmax { x: Var, axis: usize },
    Concat { xs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize, len: usize },
    Reshape(Var),
    Gather { x: Var, perm: IndexPerm, out_shape: Vec<usize> },
    BlockDct8 { x: Var, inverse: bool },
    GlobalAvgPool(Var),
    ScaleChannels { x: Var, scale: Var },
    AddBiasRows { x: Var, bias: Var },
    SumAll(Var),
    MeanAll(Var),
}

struct Node<S> {
    op: Op,
    shape: Vec<usize>,
    value: Arc<Vec<S>>,
    needs_grad: bool,
}

/// Recorded computation tape.
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    input_grads: HashMap<u32, Vec<S>>,
    scratch: std::cell::RefCell<Vec<Vec<S>>>,
    conv_patches: std::cell::RefCell<HashMap<u32, Vec<S>>>,
    retain_patches: bool,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

thread_local! {
    static OP_PROFILE: std::cell::RefCell<HashMap<&'static str, (f64, u64)>> =
        std::cell::RefCell::new(HashMap::new());
}

pub fn profile_enabled() -> bool {
    static ON: std::sync::OnceLock<bool> = std::sync::OnceLock::new();
    *ON.get_or_init(|| std::env::var("MRAG_PROFILE").is_ok())
}

pub fn profile_dump() -> Vec<(String, f64, u64)> {
    OP_PROFILE.with(|t| {
        let mut v: Vec<(String, f64, u64)> =
            t.borrow().iter().map(|(k, (s, c))| (k.to_string(), *s, *c)).collect();
        v.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        v
    })
}

fn profile_add(name: &'static str, secs: f64) {
    OP_PROFILE.with(|t| {
        let mut m = t.borrow_mut();
        let e = m.entry(name).or_insert((0.0, 0));
        e.0 += secs;
        e.1 += 1;
    });
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            input_grads: HashMap::new(),
            scratch: Default::default(),
            conv_patches: Default::default(),
            retain_patches: false,
        }
    }

    /// A graph that keeps each convolution's patch matrix alive until its
    /// backward pass consumes it, trading memory for one im2col rebuild.
    pub fn for_training() -> Self {
        Graph { retain_patches: true, ..Self::new() }
    }

    /// Transient buffer of `len` elements; contents are unspecified and the
    /// caller must overwrite what it reads.
    fn scratch_take(&self, len: usize) -> Vec<S> {
        let mut pool = self.scratch.borrow_mut();
        let mut buf = pool.pop().unwrap_or_default();
        buf.resize(len, S::zero());
        buf
    }

    fn scratch_zeroed(&self, len: usize) -> Vec<S> {
        let mut buf = self.scratch_take(len);
        buf.iter_mut().for_each(|v| *v = S::zero());
        buf
    }

    fn scratch_put(&self, buf: Vec<S>) {
        self.scratch.borrow_mut().push(buf);
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.i()].needs_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.i()].shape
    }

    /// Tensor view of a node's value (shares storage).
    pub fn value(&self, v: Var) -> Tensor<S> {
        let n = &self.nodes[v.i()];
        Tensor::from_storage(n.shape.clone(), n.value.clone())
    }

    pub fn scalar_value(&self, v: Var) -> S {
        let n = &self.nodes[v.i()];
        assert_eq!(n.value.len(), 1, "scalar_value on non-scalar node");
        n.value[0]
    }

    fn data(&self, v: Var) -> &[S] {
        &self.nodes[v.i()].value
    }

    // ---- leaf nodes ------------------------------------------------------

    pub fn input(&mut self, t: &Tensor<S>) -> Var {
        let v = Var(self.nodes.len() as u32);
        self.nodes.push(Node {
            op: Op::Input { requires_grad: t.requires_grad },
            shape: t.shape().to_vec(),
            value: t.storage().clone(),
            needs_grad: t.requires_grad,
        });
        v
    }

    /// Leaf that is never differentiated.
    pub fn constant(&mut self, t: &Tensor<S>) -> Var {
        let mut t2 = t.clone();
        t2.requires_grad = false;
        self.input(&t2)
    }

    pub fn param(&mut self, id: ParamId, store: &ParamStore<S>) -> Var {
        let t = store.value(id);
        let v = Var(self.nodes.len() as u32);
        self.nodes.push(Node {
            op: Op::Param(id),
            shape: t.shape().to_vec(),
            value: t.storage().clone(),
            needs_grad: true,
        });
        v
    }

    // ---- op builders -----------------------------------------------------

    fn push(&mut self, op: Op) -> Result<Var, TensorError> {
        let t0 = profile_enabled().then(std::time::Instant::now);
        let (shape, value) = self.compute(&op)?;
        if let Some(t) = t0 {
            profile_add(op_name(&op), t.elapsed().as_secs_f64());
        }
        let mut needs_grad = false;
        visit_op_vars(&op, |var| needs_grad |= self.nodes[var.i()].needs_grad);
        let v = Var(self.nodes.len() as u32);
        self.nodes.push(Node { op, shape, value: Arc::new(value), needs_grad });
        Ok(v)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.push(Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.push(Op::Div(a, b))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        self.push(Op::AddScalar(a, c))
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        self.push(Op::MulScalar(a, c))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, TensorError> {
        self.push(Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var, TensorError> {
        self.push(Op::Log(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var, TensorError> {
        self.push(Op::Sqrt(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, TensorError> {
        self.push(Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, TensorError> {
        self.push(Op::Sigmoid(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var, TensorError> {
        self.push(Op::LeakyRelu(a, slope))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.push(Op::Matmul(a, b))
    }

    pub fn transpose2d(&mut self, a: Var) -> Result<Var, TensorError> {
        self.push(Op::Transpose2d(a))
    }

    pub fn mat_inverse(&mut self, a: Var) -> Result<Var, TensorError> {
        self.push(Op::MatInverse(a))
    }

    pub fn conv2d(
        &mut self,
        inputs: &[Var],
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: Padding,
    ) -> Result<Var, TensorError> {
        self.push(Op::Conv2d { inputs: inputs.to_vec(), kernel, bias, stride, padding })
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, TensorError> {
        self.push(Op::LayerNorm { x, gain, bias })
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        self.push(Op::Softmax { x, axis })
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var, TensorError> {
        self.push(Op::Concat { xs: xs.to_vec(), axis })
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var, TensorError> {
        self.push(Op::Slice { x, axis, start, len })
    }

    pub fn split(&mut self, x: Var, sizes: &[usize], axis: usize) -> Result<Vec<Var>, TensorError> {
        let total: usize = sizes.iter().sum();
        let dim = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| TensorError::ShapeMismatch(format!("split axis {axis} out of range")))?;
        if total != dim {
            return Err(TensorError::ShapeMismatch(format!(
                "split sizes {sizes:?} do not sum to axis length {dim}"
            )));
        }
        let mut out = Vec::with_capacity(sizes.len());
        let mut start = 0;
        for &len in sizes {
            out.push(self.slice(x, axis, start, len)?);
            start += len;
        }
        Ok(out)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        if shape.iter().product::<usize>() != self.data(x).len() {
            return Err(TensorError::ShapeMismatch(format!(
                "cannot reshape {:?} into {:?}",
                self.shape(x),
                shape
            )));
        }
        let value = self.nodes[x.i()].value.clone();
        let needs_grad = self.nodes[x.i()].needs_grad;
        let v = Var(self.nodes.len() as u32);
        self.nodes.push(Node { op: Op::Reshape(x), shape, value, needs_grad });
        Ok(v)
    }

    pub fn gather(&mut self, x: Var, perm: &IndexPerm, out_shape: Vec<usize>) -> Result<Var, TensorError> {
        self.push(Op::Gather { x, perm: perm.clone(), out_shape })
    }

    /// Per-channel 8x8 block DCT (orthonormal type-II) of a (C,H,W) tensor.
    pub fn block_dct8(&mut self, x: Var, inverse: bool) -> Result<Var, TensorError> {
        self.push(Op::BlockDct8 { x, inverse })
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var, TensorError> {
        self.push(Op::GlobalAvgPool(x))
    }

    pub fn scale_channels(&mut self, x: Var, scale: Var) -> Result<Var, TensorError> {
        self.push(Op::ScaleChannels { x, scale })
    }

    pub fn add_bias_rows(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        self.push(Op::AddBiasRows { x, bias })
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var, TensorError> {
        self.push(Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var, TensorError> {
        self.push(Op::MeanAll(x))
    }

    /// mean((a-b)^2) as a scalar node.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        self.mean_all(sq)
    }

    // ---- evaluation ------------------------------------------------------

    fn compute(&self, op: &Op) -> Result<(Vec<usize>, Vec<S>), TensorError> {
        let (shape, value, name) = match op {
            Op::Input { .. } | Op::Param(_) => unreachable!("leaves are not recomputed"),
            Op::Add(a, b) => (
                self.binary_shape(*a, *b, "add")?,
                zip_map(self.data(*a), self.data(*b), |x, y| x + y),
                "add",
            ),
            Op::Sub(a, b) => (
                self.binary_shape(*a, *b, "sub")?,
                zip_map(self.data(*a), self.data(*b), |x, y| x - y),
                "sub",
            ),
            Op::Mul(a, b) => (
                self.binary_shape(*a, *b, "mul")?,
                zip_map(self.data(*a), self.data(*b), |x, y| x * y),
                "mul",
            ),
            Op::Div(a, b) => (
                self.binary_shape(*a, *b, "div")?,
                zip_map(self.data(*a), self.data(*b), |x, y| x / y),
                "div",
            ),
            Op::AddScalar(a, c) => {
                let c = S::from_f64(*c);
                (self.shape(*a).to_vec(), self.data(*a).iter().map(|&x| x + c).collect(), "add_scalar")
            }
            Op::MulScalar(a, c) => {
                let c = S::from_f64(*c);
                (self.shape(*a).to_vec(), self.data(*a).iter().map(|&x| x * c).collect(), "mul_scalar")
            }
            Op::Exp(a) => (self.shape(*a).to_vec(), self.data(*a).iter().map(|x| x.exp()).collect(), "exp"),
            Op::Log(a) => (self.shape(*a).to_vec(), self.data(*a).iter().map(|x| x.ln()).collect(), "log"),
            Op::Sqrt(a) => (self.shape(*a).to_vec(), self.data(*a).iter().map(|x| x.sqrt()).collect(), "sqrt"),
            Op::Tanh(a) => (self.shape(*a).to_vec(), self.data(*a).iter().map(|x| x.tanh()).collect(), "tanh"),
            Op::Sigmoid(a) => (
                self.shape(*a).to_vec(),
                self.data(*a).iter().map(|&x| S::one() / (S::one() + (-x).exp())).collect(),
                "sigmoid",
            ),
            Op::LeakyRelu(a, slope) => {
                let s = S::from_f64(*slope);
                (
                    self.shape(*a).to_vec(),
                    self.data(*a).iter().map(|&x| if x >= S::zero() { x } else { x * s }).collect(),
                    "leaky_relu",
                )
            }
            Op::Matmul(a, b) => {
                let (m, k) = self.mat_dims(*a, "matmul lhs")?;
                let (k2, n) = self.mat_dims(*b, "matmul rhs")?;
                if k != k2 {
                    return Err(TensorError::ShapeMismatch(format!(
                        "matmul inner dims {k} vs {k2}"
                    )));
                }
                let mut c = vec![S::zero(); m * n];
                unsafe {
                    S::gemm(
                        m, k, n,
                        S::one(),
                        self.data(*a).as_ptr(), k as isize, 1,
                        self.data(*b).as_ptr(), n as isize, 1,
                        S::zero(),
                        c.as_mut_ptr(),
                    );
                }
                (vec![m, n], c, "matmul")
            }
            Op::Transpose2d(a) => {
                let (m, n) = self.mat_dims(*a, "transpose")?;
                let x = self.data(*a);
                let mut y = vec![S::zero(); m * n];
                for i in 0..m {
                    for j in 0..n {
                        y[j * m + i] = x[i * n + j];
                    }
                }
                (vec![n, m], y, "transpose2d")
            }
            Op::MatInverse(a) => {
                let (m, n) = self.mat_dims(*a, "mat_inverse")?;
                if m != n {
                    return Err(TensorError::ShapeMismatch(format!(
                        "mat_inverse needs a square matrix, got {m}x{n}"
                    )));
                }
                let inv = invert_f64(&self.data(*a).iter().map(|v| v.into_f64()).collect::<Vec<_>>(), n)?;
                (vec![n, n], inv.iter().map(|&v| S::from_f64(v)).collect(), "mat_inverse")
            }
            Op::Conv2d { inputs, kernel, bias, stride, padding } => {
                let (shape, value) = self.conv_forward(inputs, *kernel, *bias, *stride, *padding)?;
                (shape, value, "conv2d")
            }
            Op::LayerNorm { x, gain, bias } => {
                let (n, d) = self.mat_dims(*x, "layer_norm")?;
                if d < 2 {
                    return Err(TensorError::ShapeMismatch("layer_norm needs dim >= 2".into()));
                }
                if self.shape(*gain) != [d] || self.shape(*bias) != [d] {
                    return Err(TensorError::ShapeMismatch("layer_norm gain/bias must be (dim)".into()));
                }
                let xv = self.data(*x);
                let gv = self.data(*gain);
                let bv = self.data(*bias);
                let mut out = vec![S::zero(); n * d];
                for r in 0..n {
                    let row = &xv[r * d..(r + 1) * d];
                    let (mu, istd) = row_stats(row);
                    for j in 0..d {
                        out[r * d + j] = (row[j] - mu) * istd * gv[j] + bv[j];
                    }
                }
                (vec![n, d], out, "layer_norm")
            }
            Op::Softmax { x, axis } => {
                let shape = self.shape(*x).to_vec();
                if *axis >= shape.len() {
                    return Err(TensorError::ShapeMismatch(format!("softmax axis {axis} out of range")));
                }
                let (outer, lane, inner) = lane_dims(&shape, *axis);
                let xv = self.data(*x);
                let mut out = vec![S::zero(); xv.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * lane + l) * inner + i;
                        let mut mx = xv[at(0)];
                        for l in 1..lane {
                            if xv[at(l)] > mx {
                                mx = xv[at(l)];
                            }
                        }
                        let mut denom = S::zero();
                        for l in 0..lane {
                            let e = (xv[at(l)] - mx).exp();
                            out[at(l)] = e;
                            denom = denom + e;
                        }
                        for l in 0..lane {
                            out[at(l)] = out[at(l)] / denom;
                        }
                    }
                }
                (shape, out, "softmax")
            }
            Op::Concat { xs, axis } => {
                let (shape, value) = self.concat_forward(xs, *axis)?;
                (shape, value, "concat")
            }
            Op::Slice { x, axis, start, len } => {
                let shape = self.shape(*x).to_vec();
                if *axis >= shape.len() || start + len > shape[*axis] {
                    return Err(TensorError::ShapeMismatch(format!(
                        "slice [{start}, {}) on axis {axis} of {shape:?}",
                        start + len
                    )));
                }
                let (outer, lane, inner) = lane_dims(&shape, *axis);
                let xv = self.data(*x);
                let mut out = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    let base = (o * lane + start) * inner;
                    out.extend_from_slice(&xv[base..base + len * inner]);
                }
                let mut s2 = shape;
                s2[*axis] = *len;
                (s2, out, "slice")
            }
            Op::Reshape(_) => unreachable!("reshape nodes share storage"),
            Op::Gather { x, perm, out_shape } => {
                let xv = self.data(*x);
                if perm.fwd.len() != xv.len()
                    || out_shape.iter().product::<usize>() != xv.len()
                {
                    return Err(TensorError::ShapeMismatch(
                        "gather permutation length must match tensor size".into(),
                    ));
                }
                let out = perm.fwd.iter().map(|&s| xv[s as usize]).collect();
                (out_shape.clone(), out, "gather")
            }
            Op::BlockDct8 { x, inverse } => {
                let shape = self.shape(*x).to_vec();
                let [c, h, w] = chw(&shape, "block_dct8")?;
                if h % 8 != 0 || w % 8 != 0 {
                    return Err(TensorError::ShapeMismatch(
                        "block_dct8 needs H and W multiples of 8".into(),
                    ));
                }
                let out = dct8::block_transform_chw(self.data(*x), c, h, w, *inverse);
                (shape, out, "block_dct8")
            }
            Op::GlobalAvgPool(x) => {
                let [c, h, w] = chw(self.shape(*x), "global_avg_pool")?;
                let xv = self.data(*x);
                let norm = S::from_f64(1.0 / (h * w) as f64);
                let out = (0..c)
                    .map(|ci| {
                        let mut acc = S::zero();
                        for &v in &xv[ci * h * w..(ci + 1) * h * w] {
                            acc = acc + v;
                        }
                        acc * norm
                    })
                    .collect();
                (vec![c], out, "global_avg_pool")
            }
            Op::ScaleChannels { x, scale } => {
                let [c, h, w] = chw(self.shape(*x), "scale_channels")?;
                if self.shape(*scale) != [c] {
                    return Err(TensorError::ShapeMismatch("scale_channels needs a (C) scale".into()));
                }
                let xv = self.data(*x);
                let sv = self.data(*scale);
                let mut out = vec![S::zero(); xv.len()];
                for ci in 0..c {
                    let s = sv[ci];
                    for p in 0..h * w {
                        out[ci * h * w + p] = xv[ci * h * w + p] * s;
                    }
                }
                (self.shape(*x).to_vec(), out, "scale_channels")
            }
            Op::AddBiasRows { x, bias } => {
                let (n, d) = self.mat_dims(*x, "add_bias_rows")?;
                if self.shape(*bias) != [d] {
                    return Err(TensorError::ShapeMismatch("bias must be (dim)".into()));
                }
                let xv = self.data(*x);
                let bv = self.data(*bias);
                let mut out = vec![S::zero(); n * d];
                for r in 0..n {
                    for j in 0..d {
                        out[r * d + j] = xv[r * d + j] + bv[j];
                    }
                }
                (vec![n, d], out, "add_bias_rows")
            }
            Op::SumAll(x) => {
                let mut acc = S::zero();
                for &v in self.data(*x) {
                    acc = acc + v;
                }
                (vec![1], vec![acc], "sum_all")
            }
            Op::MeanAll(x) => {
                let xv = self.data(*x);
                let mut acc = S::zero();
                for &v in xv {
                    acc = acc + v;
                }
                (vec![1], vec![acc * S::from_f64(1.0 / xv.len() as f64)], "mean_all")
            }
        };
        if !value.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: name });
        }
        Ok((shape, value))
    }

    fn concat_forward(&self, xs: &[Var], axis: usize) -> Result<(Vec<usize>, Vec<S>), TensorError> {
        if xs.is_empty() {
            return Err(TensorError::ShapeMismatch("concat of zero tensors".into()));
        }
        let first = self.shape(xs[0]).to_vec();
        if axis >= first.len() {
            return Err(TensorError::ShapeMismatch(format!("concat axis {axis} out of range")));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(TensorError::ShapeMismatch(format!(
                    "concat of {:?} with {:?} along axis {axis}",
                    first, s
                )));
            }
            total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = lane_dims(&out_shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let len = self.shape(x)[axis];
                let data = self.data(x);
                let base = o * len * inner;
                out.extend_from_slice(&data[base..base + len * inner]);
            }
        }
        Ok((out_shape, out))
    }

    fn binary_shape(&self, a: Var, b: Var, what: &str) -> Result<Vec<usize>, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(self.shape(a).to_vec())
    }

    fn mat_dims(&self, a: Var, what: &str) -> Result<(usize, usize), TensorError> {
        match self.shape(a) {
            [m, n] => Ok((*m, *n)),
            s => Err(TensorError::ShapeMismatch(format!("{what} expects a 2-d tensor, got {s:?}"))),
        }
    }

    fn conv_forward(
        &self,
        inputs: &[Var],
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: Padding,
    ) -> Result<(Vec<usize>, Vec<S>), TensorError> {
        let geom = self.conv_geometry(inputs, kernel, stride, padding)?;
        if let Some(b) = bias {
            if self.shape(b) != [geom.c_out] {
                return Err(TensorError::ShapeMismatch("conv bias must be (C_out)".into()));
            }
        }
        let m = geom.c_out;
        let kk = geom.c_in * geom.k * geom.k;
        let n = geom.h_out * geom.w_out;
        let t0 = profile_enabled().then(std::time::Instant::now);
        let mut patches = self.scratch_take(kk * n);
        {
            let srcs: Vec<(&[S], usize)> =
                inputs.iter().map(|&v| (self.data(v), self.shape(v)[0])).collect();
            im2col(&srcs, &geom, &mut patches);
        }
        if let Some(t) = t0 {
            profile_add("conv.im2col", t.elapsed().as_secs_f64());
        }
        let t0 = profile_enabled().then(std::time::Instant::now);
        let mut out = vec![S::zero(); m * n];
        unsafe {
            S::gemm(
                m, kk, n,
                S::one(),
                self.data(kernel).as_ptr(), kk as isize, 1,
                patches.as_ptr(), n as isize, 1,
                S::zero(),
                out.as_mut_ptr(),
            );
        }
        if let Some(t) = t0 {
            profile_add("conv.gemm", t.elapsed().as_secs_f64());
        }
        if self.retain_patches {
            self.conv_patches.borrow_mut().insert(self.nodes.len() as u32, patches);
        } else {
            self.scratch_put(patches);
        }
        if let Some(b) = bias {
            let bv = self.data(b);
            for c in 0..m {
                let bc = bv[c];
                for p in 0..n {
                    out[c * n + p] = out[c * n + p] + bc;
                }
            }
        }
        Ok((vec![geom.c_out, geom.h_out, geom.w_out], out))
    }

    fn conv_geometry(
        &self,
        inputs: &[Var],
        kernel: Var,
        stride: usize,
        padding: Padding,
    ) -> Result<ConvGeom, TensorError> {
        if inputs.is_empty() {
            return Err(TensorError::ShapeMismatch("conv2d needs at least one input".into()));
        }
        let [c0, h, w] = chw(self.shape(inputs[0]), "conv2d input")?;
        let mut c_in = c0;
        for &v in &inputs[1..] {
            let [ci, hi, wi] = chw(self.shape(v), "conv2d input")?;
            if hi != h || wi != w {
                return Err(TensorError::ShapeMismatch("conv2d inputs must share H,W".into()));
            }
            c_in += ci;
        }
        let ks = self.shape(kernel);
        let (c_out, kc, k) = match ks {
            [co, ci, kh, kw] if kh == kw => (*co, *ci, *kh),
            _ => {
                return Err(TensorError::ShapeMismatch(format!(
                    "conv kernel must be (C_out, C_in, k, k), got {ks:?}"
                )))
            }
        };
        if kc != c_in {
            return Err(TensorError::ShapeMismatch(format!(
                "conv kernel expects {kc} input channels, inputs supply {c_in}"
            )));
        }
        if !(k == 1 || k == 3) {
            return Err(TensorError::ShapeMismatch(format!("conv kernel size {k} not in {{1,3}}")));
        }
        if stride == 0 || stride > 2 {
            return Err(TensorError::ShapeMismatch(format!("conv stride {stride} not in {{1,2}}")));
        }
        let pad = match padding {
            Padding::Same => (k - 1) / 2,
            Padding::None => 0,
        };
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(TensorError::ShapeMismatch("conv input smaller than kernel".into()));
        }
        let h_out = (h + 2 * pad - k) / stride + 1;
        let w_out = (w + 2 * pad - k) / stride + 1;
        Ok(ConvGeom { c_in, c_out, h, w, k, stride, pad, h_out, w_out })
    }

    // ---- backward --------------------------------------------------------

    /// Accumulates dLoss/dParam into `store` for every parameter reachable
    /// from `loss`, and keeps gradients of `requires_grad` inputs readable
    /// via [`Graph::input_grad`]. Gradients add up across calls.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore<S>) -> Result<(), TensorError> {
        if self.data(loss).len() != 1 {
            return Err(TensorError::NotScalar(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.i()] = Some(vec![S::one()]);
        for i in (0..=loss.i()).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            match &self.nodes[i].op {
                Op::Input { requires_grad } => {
                    if *requires_grad {
                        match self.input_grads.entry(i as u32) {
                            std::collections::hash_map::Entry::Occupied(mut e) => {
                                for (acc, d) in e.get_mut().iter_mut().zip(&g) {
                                    *acc = *acc + *d;
                                }
                            }
                            std::collections::hash_map::Entry::Vacant(e) => {
                                e.insert(g);
                            }
                        }
                    }
                }
                Op::Param(id) => store.accumulate_grad(*id, &g),
                op => {
                    let op = op.clone();
                    let t0 = profile_enabled().then(std::time::Instant::now);
                    self.backprop(&op, i, g, &mut grads)?;
                    if let Some(t) = t0 {
                        profile_add(op_name_bwd(&op), t.elapsed().as_secs_f64());
                    }
                }
            }
        }
        Ok(())
    }

    pub fn input_grad(&self, v: Var) -> Option<&[S]> {
        self.input_grads.get(&v.0).map(|g| g.as_slice())
    }

    fn backprop(
        &self,
        op: &Op,
        node: usize,
        g: Vec<S>,
        grads: &mut Vec<Option<Vec<S>>>,
    ) -> Result<(), TensorError> {
        match op {
            Op::Input { .. } | Op::Param(_) => unreachable!(),
            Op::Add(a, b) => {
                if self.needs(*b) {
                    accumulate(grads, *b, g.clone());
                }
                if self.needs(*a) {
                    accumulate(grads, *a, g);
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*b) {
                    accumulate(grads, *b, g.iter().map(|&v| -v).collect());
                }
                if self.needs(*a) {
                    accumulate(grads, *a, g);
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, zip_map(&g, self.data(*b), |x, y| x * y));
                }
                if self.needs(*b) {
                    accumulate(grads, *b, zip_map(&g, self.data(*a), |x, y| x * y));
                }
            }
            Op::Div(a, b) => {
                let bv = self.data(*b);
                if self.needs(*a) {
                    accumulate(grads, *a, zip_map(&g, bv, |x, y| x / y));
                }
                if self.needs(*b) {
                    let out = &self.nodes[node].value;
                    let db: Vec<S> = g
                        .iter()
                        .zip(out.iter())
                        .zip(bv.iter())
                        .map(|((&gi, &oi), &bi)| -gi * oi / bi)
                        .collect();
                    accumulate(grads, *b, db);
                }
            }
            Op::AddScalar(a, _) => accumulate(grads, *a, g),
            Op::MulScalar(a, c) => {
                let c = S::from_f64(*c);
                accumulate(grads, *a, g.iter().map(|&v| v * c).collect());
            }
            Op::Exp(a) => {
                accumulate(grads, *a, zip_map(&g, &self.nodes[node].value, |x, y| x * y));
            }
            Op::Log(a) => {
                accumulate(grads, *a, zip_map(&g, self.data(*a), |x, y| x / y));
            }
            Op::Sqrt(a) => {
                let half = S::from_f64(0.5);
                accumulate(
                    grads,
                    *a,
                    zip_map(&g, &self.nodes[node].value, |x, y| x * half / y),
                );
            }
            Op::Tanh(a) => {
                accumulate(
                    grads,
                    *a,
                    zip_map(&g, &self.nodes[node].value, |x, t| x * (S::one() - t * t)),
                );
            }
            Op::Sigmoid(a) => {
                accumulate(
                    grads,
                    *a,
                    zip_map(&g, &self.nodes[node].value, |x, s| x * s * (S::one() - s)),
                );
            }
            Op::LeakyRelu(a, slope) => {
                let s = S::from_f64(*slope);
                accumulate(
                    grads,
                    *a,
                    zip_map(&g, self.data(*a), |gi, xi| if xi >= S::zero() { gi } else { gi * s }),
                );
            }
            Op::Matmul(a, b) => {
                let (m, k) = self.mat_dims(*a, "")?;
                let n = self.shape(*b)[1];
                if self.needs(*a) {
                    // dA = G * B^T
                    let mut da = vec![S::zero(); m * k];
                    unsafe {
                        S::gemm(
                            m, n, k,
                            S::one(),
                            g.as_ptr(), n as isize, 1,
                            self.data(*b).as_ptr(), 1, n as isize,
                            S::zero(),
                            da.as_mut_ptr(),
                        );
                    }
                    accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    // dB = A^T * G
                    let mut db = vec![S::zero(); k * n];
                    unsafe {
                        S::gemm(
                            k, m, n,
                            S::one(),
                            self.data(*a).as_ptr(), 1, k as isize,
                            g.as_ptr(), n as isize, 1,
                            S::zero(),
                            db.as_mut_ptr(),
                        );
                    }
                    accumulate(grads, *b, db);
                }
            }
            Op::Transpose2d(a) => {
                let (m, n) = self.mat_dims(*a, "")?;
                // g has shape (n, m)
                let mut da = vec![S::zero(); m * n];
                for i in 0..n {
                    for j in 0..m {
                        da[j * n + i] = g[i * m + j];
                    }
                }
                accumulate(grads, *a, da);
            }
            Op::MatInverse(a) => {
                let n = self.shape(*a)[0];
                let y = &self.nodes[node].value;
                // dA = -Y^T * G * Y^T
                let mut t = vec![S::zero(); n * n];
                unsafe {
                    S::gemm(
                        n, n, n,
                        S::one(),
                        y.as_ptr(), 1, n as isize,
                        g.as_ptr(), n as isize, 1,
                        S::zero(),
                        t.as_mut_ptr(),
                    );
                }
                let mut da = vec![S::zero(); n * n];
                unsafe {
                    S::gemm(
                        n, n, n,
                        -S::one(),
                        t.as_ptr(), n as isize, 1,
                        y.as_ptr(), 1, n as isize,
                        S::zero(),
                        da.as_mut_ptr(),
                    );
                }
                accumulate(grads, *a, da);
            }
            Op::Conv2d { inputs, kernel, bias, stride, padding } => {
                self.conv_backward(node, inputs, *kernel, *bias, *stride, *padding, &g, grads)?;
            }
            Op::LayerNorm { x, gain, bias } => {
                let (n, d) = self.mat_dims(*x, "")?;
                let xv = self.data(*x);
                let gv = self.data(*gain);
                let mut dgain = vec![S::zero(); d];
                let mut dbias = vec![S::zero(); d];
                let mut dx = vec![S::zero(); n * d];
                let inv_d = S::from_f64(1.0 / d as f64);
                for r in 0..n {
                    let row = &xv[r * d..(r + 1) * d];
                    let (mu, istd) = row_stats(row);
                    let grow = &g[r * d..(r + 1) * d];
                    let mut mean_gg = S::zero();
                    let mut mean_ggx = S::zero();
                    for j in 0..d {
                        let xhat = (row[j] - mu) * istd;
                        let gg = grow[j] * gv[j];
                        dgain[j] = dgain[j] + grow[j] * xhat;
                        dbias[j] = dbias[j] + grow[j];
                        mean_gg = mean_gg + gg;
                        mean_ggx = mean_ggx + gg * xhat;
                    }
                    mean_gg = mean_gg * inv_d;
                    mean_ggx = mean_ggx * inv_d;
                    for j in 0..d {
                        let xhat = (row[j] - mu) * istd;
                        let gg = grow[j] * gv[j];
                        dx[r * d + j] = (gg - mean_gg - xhat * mean_ggx) * istd;
                    }
                }
                if self.needs(*x) {
                    accumulate(grads, *x, dx);
                }
                if self.needs(*gain) {
                    accumulate(grads, *gain, dgain);
                }
                if self.needs(*bias) {
                    accumulate(grads, *bias, dbias);
                }
            }
            Op::Softmax { x, axis } => {
                let shape = self.shape(*x).to_vec();
                let (outer, lane, inner) = lane_dims(&shape, *axis);
                let sv = &self.nodes[node].value;
                let mut dx = vec![S::zero(); sv.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * lane + l) * inner + i;
                        let mut dot = S::zero();
                        for l in 0..lane {
                            dot = dot + g[at(l)] * sv[at(l)];
                        }
                        for l in 0..lane {
                            dx[at(l)] = sv[at(l)] * (g[at(l)] - dot);
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Concat { xs, axis } => {
                let out_shape = self.shape(Var(node as u32)).to_vec();
                let (outer, _, inner) = lane_dims(&out_shape, *axis);
                let lane_total = out_shape[*axis];
                let mut start = 0;
                for &xvar in xs {
                    let len = self.shape(xvar)[*axis];
                    if self.needs(xvar) {
                        let mut dx = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * lane_total + start) * inner;
                            dx.extend_from_slice(&g[base..base + len * inner]);
                        }
                        accumulate(grads, xvar, dx);
                    }
                    start += len;
                }
            }
            Op::Slice { x, axis, start, len } => {
                let xshape = self.shape(*x).to_vec();
                let (outer, lane, inner) = lane_dims(&xshape, *axis);
                let mut dx = vec![S::zero(); outer * lane * inner];
                for o in 0..outer {
                    let src = o * len * inner;
                    let dst = (o * lane + start) * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                accumulate(grads, *x, dx);
            }
            Op::Reshape(a) => accumulate(grads, *a, g),
            Op::Gather { x, perm, .. } => {
                let mut dx = vec![S::zero(); self.data(*x).len()];
                for (i, &src) in perm.fwd.iter().enumerate() {
                    dx[src as usize] = dx[src as usize] + g[i];
                }
                accumulate(grads, *x, dx);
            }
            Op::BlockDct8 { x, inverse } => {
                let [c, h, w] = chw(self.shape(*x), "block_dct8")?;
                let dx = dct8::block_transform_chw(&g, c, h, w, !*inverse);
                accumulate(grads, *x, dx);
            }
            Op::GlobalAvgPool(x) => {
                let [c, h, w] = chw(self.shape(*x), "global_avg_pool")?;
                let norm = S::from_f64(1.0 / (h * w) as f64);
                let mut dx = vec![S::zero(); c * h * w];
                for ci in 0..c {
                    let gc = g[ci] * norm;
                    for p in 0..h * w {
                        dx[ci * h * w + p] = gc;
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::ScaleChannels { x, scale } => {
                let [c, h, w] = chw(self.shape(*x), "scale_channels")?;
                let xv = self.data(*x);
                let sv = self.data(*scale);
                let mut dx = vec![S::zero(); c * h * w];
                let mut ds = vec![S::zero(); c];
                for ci in 0..c {
                    let s = sv[ci];
                    let mut acc = S::zero();
                    for p in 0..h * w {
                        let idx = ci * h * w + p;
                        dx[idx] = g[idx] * s;
                        acc = acc + g[idx] * xv[idx];
                    }
                    ds[ci] = acc;
                }
                if self.needs(*x) {
                    accumulate(grads, *x, dx);
                }
                if self.needs(*scale) {
                    accumulate(grads, *scale, ds);
                }
            }
            Op::AddBiasRows { x, bias } => {
                let (n, d) = self.mat_dims(*x, "")?;
                let mut db = vec![S::zero(); d];
                for r in 0..n {
                    for j in 0..d {
                        db[j] = db[j] + g[r * d + j];
                    }
                }
                if self.needs(*bias) {
                    accumulate(grads, *bias, db);
                }
                if self.needs(*x) {
                    accumulate(grads, *x, g);
                }
            }
            Op::SumAll(x) => {
                let g0 = g[0];
                accumulate(grads, *x, vec![g0; self.data(*x).len()]);
            }
            Op::MeanAll(x) => {
                let n = self.data(*x).len();
                let g0 = g[0] * S::from_f64(1.0 / n as f64);
                accumulate(grads, *x, vec![g0; n]);
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        node: usize,
        inputs: &[Var],
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: Padding,
        g: &[S],
        grads: &mut [Option<Vec<S>>],
    ) -> Result<(), TensorError> {
        let geom = self.conv_geometry(inputs, kernel, stride, padding)?;
        let m = geom.c_out;
        let kk = geom.c_in * geom.k * geom.k;
        let n = geom.h_out * geom.w_out;
        if let Some(b) = bias {
            if self.needs(b) {
                let mut db = vec![S::zero(); m];
                for c in 0..m {
                    let mut acc = S::zero();
                    for p in 0..n {
                        acc = acc + g[c * n + p];
                    }
                    db[c] = acc;
                }
                accumulate(grads, b, db);
            }
        }
        if self.needs(kernel) {
            let t0 = profile_enabled().then(std::time::Instant::now);
            let patches = match self.conv_patches.borrow_mut().remove(&(node as u32)) {
                Some(p) => p,
                None => {
                    let mut p = self.scratch_take(kk * n);
                    let srcs: Vec<(&[S], usize)> =
                        inputs.iter().map(|&v| (self.data(v), self.shape(v)[0])).collect();
                    im2col(&srcs, &geom, &mut p);
                    p
                }
            };
            if let Some(t) = t0 {
                profile_add("bconv.im2col", t.elapsed().as_secs_f64());
            }
            let t0 = profile_enabled().then(std::time::Instant::now);
            // dK = G (m,n) * P^T (n,kk)
            let mut dk = vec![S::zero(); m * kk];
            unsafe {
                S::gemm(
                    m, n, kk,
                    S::one(),
                    g.as_ptr(), n as isize, 1,
                    patches.as_ptr(), 1, n as isize,
                    S::zero(),
                    dk.as_mut_ptr(),
                );
            }
            if let Some(t) = t0 {
                profile_add("bconv.dk_gemm", t.elapsed().as_secs_f64());
            }
            self.scratch_put(patches);
            accumulate(grads, kernel, dk);
        }
        if inputs.iter().any(|&v| self.needs(v)) {
            let t0 = profile_enabled().then(std::time::Instant::now);
            // dP = K^T (kk,m) * G (m,n)
            let mut dp = self.scratch_take(kk * n);
            unsafe {
                S::gemm(
                    kk, m, n,
                    S::one(),
                    self.data(kernel).as_ptr(), 1, kk as isize,
                    g.as_ptr(), n as isize, 1,
                    S::zero(),
                    dp.as_mut_ptr(),
                );
            }
            if let Some(t) = t0 {
                profile_add("bconv.dp_gemm", t.elapsed().as_secs_f64());
            }
            let t0 = profile_enabled().then(std::time::Instant::now);
            let mut dxs: Vec<Option<Vec<S>>> = inputs
                .iter()
                .map(|&v| self.needs(v).then(|| vec![S::zero(); self.data(v).len()]))
                .collect();
            {
                let channels: Vec<usize> = inputs.iter().map(|&v| self.shape(v)[0]).collect();
                col2im_add(&dp, &mut dxs, &channels, &geom);
            }
            if let Some(t) = t0 {
                profile_add("bconv.col2im", t.elapsed().as_secs_f64());
            }
            self.scratch_put(dp);
            for (&v, dx) in inputs.iter().zip(dxs) {
                if let Some(dx) = dx {
                    accumulate(grads, v, dx);
                }
            }
        }
        Ok(())
    }

    /// Recomputes every non-leaf node from its record and checks the stored
    /// value is reproduced bit-identically.
    pub fn replay_check(&self) -> bool {
        for i in 0..self.nodes.len() {
            match &self.nodes[i].op {
                Op::Input { .. } | Op::Param(_) | Op::Reshape(_) => continue,
                op => match self.compute(op) {
                    Ok((_, value)) => {
                        let stored = &self.nodes[i].value;
                        if stored.len() != value.len()
                            || !stored
                                .iter()
                                .zip(&value)
                                .all(|(a, b)| a.into_f64().to_bits() == b.into_f64().to_bits())
                        {
                            return false;
                        }
                    }
                    Err(_) => return false,
                },
            }
        }
        true
    }
}

struct ConvGeom {
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Input { .. } => "input",
        Op::Param(_) => "param",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Div(..) => "div",
        Op::AddScalar(..) => "add_scalar",
        Op::MulScalar(..) => "mul_scalar",
        Op::Exp(_) => "exp",
        Op::Log(_) => "log",
        Op::Sqrt(_) => "sqrt",
        Op::Tanh(_) => "tanh",
        Op::Sigmoid(_) => "sigmoid",
        Op::LeakyRelu(..) => "leaky_relu",
        Op::Matmul(..) => "matmul",
        Op::Transpose2d(_) => "transpose2d",
        Op::MatInverse(_) => "mat_inverse",
        Op::Conv2d { .. } => "conv2d",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Softmax { .. } => "softmax",
        Op::Concat { .. } => "concat",
        Op::Slice { .. } => "slice",
        Op::Reshape(_) => "reshape",
        Op::Gather { .. } => "gather",
        Op::BlockDct8 { .. } => "block_dct8",
        Op::GlobalAvgPool(_) => "global_avg_pool",
        Op::ScaleChannels { .. } => "scale_channels",
        Op::AddBiasRows { .. } => "add_bias_rows",
        Op::SumAll(_) => "sum_all",
        Op::MeanAll(_) => "mean_all",
    }
}

fn op_name_bwd(op: &Op) -> &'static str {
    match op {
        Op::Conv2d { .. } => "bwd_conv2d",
        Op::Matmul(..) => "bwd_matmul",
        Op::Mul(..) => "bwd_mul",
        Op::Add(..) => "bwd_add",
        Op::Sub(..) => "bwd_sub",
        Op::Concat { .. } => "bwd_concat",
        Op::Slice { .. } => "bwd_slice",
        Op::LeakyRelu(..) => "bwd_leaky",
        Op::Exp(_) => "bwd_exp",
        Op::Tanh(_) => "bwd_tanh",
        Op::Gather { .. } => "bwd_gather",
        Op::LayerNorm { .. } => "bwd_layer_norm",
        Op::Softmax { .. } => "bwd_softmax",
        _ => "bwd_other",
    }
}

/// Visits every operand variable of an operation.
fn visit_op_vars(op: &Op, mut f: impl FnMut(Var)) {
    match op {
        Op::Input { .. } | Op::Param(_) => {}
        Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::Div(a, b)
        | Op::Matmul(a, b) => {
            f(*a);
            f(*b);
        }
        Op::AddScalar(a, _)
        | Op::MulScalar(a, _)
        | Op::Exp(a)
        | Op::Log(a)
        | Op::Sqrt(a)
        | Op::Tanh(a)
        | Op::Sigmoid(a)
        | Op::LeakyRelu(a, _)
        | Op::Transpose2d(a)
        | Op::MatInverse(a)
        | Op::Reshape(a)
        | Op::SumAll(a)
        | Op::MeanAll(a)
        | Op::GlobalAvgPool(a) => f(*a),
        Op::Conv2d { inputs, kernel, bias, .. } => {
            inputs.iter().for_each(|&v| f(v));
            f(*kernel);
            if let Some(b) = bias {
                f(*b);
            }
        }
        Op::LayerNorm { x, gain, bias } => {
            f(*x);
            f(*gain);
            f(*bias);
        }
        Op::Softmax { x, .. } | Op::Slice { x, .. } | Op::Gather { x, .. } | Op::BlockDct8 { x, .. } => {
            f(*x)
        }
        Op::Concat { xs, .. } => xs.iter().for_each(|&v| f(v)),
        Op::ScaleChannels { x, scale } => {
            f(*x);
            f(*scale);
        }
        Op::AddBiasRows { x, bias } => {
            f(*x);
            f(*bias);
        }
    }
}

fn zip_map<S: Scalar>(a: &[S], b: &[S], f: impl Fn(S, S) -> S) -> Vec<S> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn accumulate<S: Scalar>(grads: &mut [Option<Vec<S>>], v: Var, delta: Vec<S>) {
    match &mut grads[v.i()] {
        Some(acc) => {
            debug_assert_eq!(acc.len(), delta.len());
            for (a, d) in acc.iter_mut().zip(delta) {
                *a = *a + d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

fn lane_dims(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let lane = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, lane, inner)
}

fn chw(shape: &[usize], what: &str) -> Result<[usize; 3], TensorError> {
    match shape {
        [c, h, w] => Ok([*c, *h, *w]),
        s => Err(TensorError::ShapeMismatch(format!("{what} expects (C,H,W), got {s:?}"))),
    }
}

fn row_stats<S: Scalar>(row: &[S]) -> (S, S) {
    let d = row.len();
    let inv_d = S::from_f64(1.0 / d as f64);
    let mut mu = S::zero();
    for &v in row {
        mu = mu + v;
    }
    mu = mu * inv_d;
    let mut var = S::zero();
    for &v in row {
        let c = v - mu;
        var = var + c * c;
    }
    var = var * inv_d;
    let istd = S::one() / (var + S::from_f64(LAYER_NORM_EPS)).sqrt();
    (mu, istd)
}

/// Row-major patch matrix (C_in*k*k, H_out*W_out) over the channel-stacked
/// inputs, zero-padded at the borders. `out` must be zeroed by the caller.
fn im2col<S: Scalar>(srcs: &[(&[S], usize)], geom: &ConvGeom, out: &mut [S]) {
    let ConvGeom { h, w, k, stride, pad, h_out, w_out, .. } = *geom;
    let cols = h_out * w_out;
    debug_assert_eq!(out.len(), geom.c_in * k * k * cols);
    let mut row = 0;
    for &(data, channels) in srcs {
        for c in 0..channels {
            let plane = &data[c * h * w..(c + 1) * h * w];
            for di in 0..k {
                for dj in 0..k {
                    let dst_row = &mut out[row * cols..(row + 1) * cols];
                    row += 1;
                    for oy in 0..h_out {
                        let iy = (oy * stride + di) as isize - pad as isize;
                        let dst_base = oy * w_out;
                        if iy < 0 || iy >= h as isize {
                            dst_row[dst_base..dst_base + w_out].iter_mut().for_each(|v| *v = S::zero());
                            continue;
                        }
                        let src_base = iy as usize * w;
                        if stride == 1 {
                            // valid x range: 0 <= x + dj - pad < w
                            let x0 = pad.saturating_sub(dj);
                            let x1 = (w + pad - dj).min(w_out);
                            dst_row[dst_base..dst_base + x0.min(w_out)]
                                .iter_mut()
                                .for_each(|v| *v = S::zero());
                            if x0 < x1 {
                                let src0 = src_base + x0 + dj - pad;
                                dst_row[dst_base + x0..dst_base + x1]
                                    .copy_from_slice(&plane[src0..src0 + (x1 - x0)]);
                            }
                            dst_row[dst_base + x1.max(x0)..dst_base + w_out]
                                .iter_mut()
                                .for_each(|v| *v = S::zero());
                        } else {
                            for ox in 0..w_out {
                                let ix = (ox * stride + dj) as isize - pad as isize;
                                dst_row[dst_base + ox] = if ix >= 0 && ix < w as isize {
                                    plane[src_base + ix as usize]
                                } else {
                                    S::zero()
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds patch-matrix gradients back onto the
/// per-input gradient buffers.
fn col2im_add<S: Scalar>(dp: &[S], dxs: &mut [Option<Vec<S>>], channels: &[usize], geom: &ConvGeom) {
    let ConvGeom { h, w, k, stride, pad, h_out, w_out, .. } = *geom;
    let cols = h_out * w_out;
    let mut row = 0;
    for (src_idx, &ch) in channels.iter().enumerate() {
        let Some(dst) = dxs[src_idx].as_mut() else {
            row += ch * k * k;
            continue;
        };
        for c in 0..ch {
            let plane = &mut dst[c * h * w..(c + 1) * h * w];
            for di in 0..k {
                for dj in 0..k {
                    let src_row = &dp[row * cols..(row + 1) * cols];
                    row += 1;
                    for oy in 0..h_out {
                        let iy = (oy * stride + di) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst_base = iy as usize * w;
                        let src_base = oy * w_out;
                        if stride == 1 {
                            let x0 = pad.saturating_sub(dj);
                            let x1 = (w + pad - dj).min(w_out);
                            if x0 < x1 {
                                let d0 = dst_base + x0 + dj - pad;
                                let dst = &mut plane[d0..d0 + (x1 - x0)];
                                let src = &src_row[src_base + x0..src_base + x1];
                                for (d, &v) in dst.iter_mut().zip(src) {
                                    *d = *d + v;
                                }
                            }
                        } else {
                            for ox in 0..w_out {
                                let ix = (ox * stride + dj) as isize - pad as isize;
                                if ix >= 0 && ix < w as isize {
                                    let d = dst_base + ix as usize;
                                    plane[d] = plane[d] + src_row[src_base + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gauss-Jordan inverse with partial pivoting, in f64 for accuracy in both
/// precisions. Errors when the 1-norm condition estimate exceeds 1e6.
pub(crate) fn invert_f64(a: &[f64], n: usize) -> Result<Vec<f64>, TensorError> {
    let mut m = a.to_vec();
    let mut inv: Vec<f64> = (0..n * n)
        .map(|i| if i / n == i % n { 1.0 } else { 0.0 })
        .collect();
    for col in 0..n {
        let mut piv = col;
        let mut best = m[col * n + col].abs();
        for r in col + 1..n {
            let v = m[r * n + col].abs();
            if v > best {
                best = v;
                piv = r;
            }
        }
        if best < 1e-300 {
            return Err(TensorError::IllConditioned { cond: f64::INFINITY });
        }
        if piv != col {
            for j in 0..n {
                m.swap(col * n + j, piv * n + j);
                inv.swap(col * n + j, piv * n + j);
            }
        }
        let d = m[col * n + col];
        for j in 0..n {
            m[col * n + j] /= d;
            inv[col * n + j] /= d;
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = m[r * n + col];
            if f != 0.0 {
                for j in 0..n {
                    m[r * n + j] -= f * m[col * n + j];
                    inv[r * n + j] -= f * inv[col * n + j];
                }
            }
        }
    }
    let cond = norm1(a, n) * norm1(&inv, n);
    if !cond.is_finite() || cond > 1e6 {
        return Err(TensorError::IllConditioned { cond });
    }
    Ok(inv)
}

/// Max column-absolute-sum norm.
pub(crate) fn norm1(a: &[f64], n: usize) -> f64 {
    (0..n)
        .map(|j| (0..n).map(|i| a[i * n + j].abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// 1-norm condition estimate; errors if the matrix is numerically singular.
pub fn condition_1norm(a: &[f64], n: usize) -> Result<f64, TensorError> {
    let inv = invert_f64(a, n)?;
    Ok(norm1(a, n) * norm1(&inv, n))
}
