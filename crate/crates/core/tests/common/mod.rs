//! Shared helpers for the integration suites: central finite-difference
//! gradient oracles, kept independent of the graph's own backward pass.

use mrag_core::rng::DetRng;
use mrag_core::scalar::Scalar;
use mrag_core::tensor::graph::{Graph, Var};
use mrag_core::tensor::param::ParamStore;
use mrag_core::tensor::Tensor;

/// Per-precision gradient tolerance: 1e-3 at 32-bit, 1e-6 at 64-bit.
pub fn grad_tol<S: Scalar>() -> f64 {
    if S::BITS == 32 {
        1e-3
    } else {
        1e-6
    }
}

fn fd_step<S: Scalar>(x: f64) -> f64 {
    let base = if S::BITS == 32 { 5e-3 } else { 1e-6 };
    base * (1.0 + x.abs())
}

/// Relative L2 error between the autodiff gradient of `build`'s scalar
/// output w.r.t. the input tensor and a central finite-difference estimate.
/// `params` must hold every parameter the closure touches.
pub fn input_grad_rel_err<S: Scalar>(
    x0: &Tensor<S>,
    params: &ParamStore<S>,
    build: &dyn Fn(&mut Graph<S>, Var) -> Var,
) -> f64 {
    let mut x0 = x0.clone();
    x0.requires_grad = true;
    let mut g = Graph::new();
    let xv = g.input(&x0);
    let loss = build(&mut g, xv);
    assert_eq!(g.value(loss).numel(), 1, "grad check needs a scalar loss");
    let mut store = params.clone();
    g.backward(loss, &mut store).expect("backward");
    let ad: Vec<f64> = g.input_grad(xv).expect("input grad").iter().map(|v| v.into_f64()).collect();

    let eval = |xt: &Tensor<S>| -> f64 {
        let mut g2 = Graph::new();
        let xv2 = g2.input(xt);
        let l = build(&mut g2, xv2);
        g2.scalar_value(l).into_f64()
    };
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..x0.numel() {
        let xi = x0.data()[i].into_f64();
        let h = fd_step::<S>(xi);
        let mut plus = x0.clone();
        plus.data_mut()[i] = S::from_f64(xi + h);
        let mut minus = x0.clone();
        minus.data_mut()[i] = S::from_f64(xi - h);
        let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
        num += (ad[i] - fd) * (ad[i] - fd);
        den += fd * fd;
    }
    num.sqrt() / den.sqrt().max(1e-8)
}

/// Same, but differentiating w.r.t. stored parameters. To keep run time
/// bounded, at most `samples_per_param` elements of each parameter are
/// probed (seeded choice).
pub fn param_grad_rel_err<S: Scalar>(
    store: &ParamStore<S>,
    build: &dyn Fn(&mut Graph<S>, &ParamStore<S>) -> Var,
    samples_per_param: usize,
    seed: u64,
) -> f64 {
    let mut g = Graph::new();
    let loss = build(&mut g, store);
    assert_eq!(g.value(loss).numel(), 1);
    let mut grads = store.clone();
    grads.zero_grads();
    g.backward(loss, &mut grads).expect("backward");

    let eval = |ps: &ParamStore<S>| -> f64 {
        let mut g2 = Graph::new();
        let l = build(&mut g2, ps);
        g2.scalar_value(l).into_f64()
    };
    let mut rng = DetRng::new(seed);
    let mut num = 0.0;
    let mut den = 0.0;
    for id in store.ids() {
        let numel = store.value(id).numel();
        let picks: Vec<usize> = if numel <= samples_per_param {
            (0..numel).collect()
        } else {
            (0..samples_per_param).map(|_| rng.below(numel)).collect()
        };
        for i in picks {
            let xi = store.value(id).data()[i].into_f64();
            let h = fd_step::<S>(xi);
            let mut plus = store.clone();
            plus.value_mut(id).data_mut()[i] = S::from_f64(xi + h);
            let mut minus = store.clone();
            minus.value_mut(id).data_mut()[i] = S::from_f64(xi - h);
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let ad = grads.grad(id)[i].into_f64();
            num += (ad - fd) * (ad - fd);
            den += fd * fd;
        }
    }
    num.sqrt() / den.sqrt().max(1e-8)
}

/// Random tensor in roughly unit scale.
pub fn randn<S: Scalar>(shape: &[usize], seed: u64) -> Tensor<S> {
    let mut rng = DetRng::new(seed);
    Tensor::randn(shape.to_vec(), 1.0, &mut rng)
}

/// Same parameter ids and values at f64 precision.
pub fn store_to_f64<S: Scalar>(ps: &ParamStore<S>) -> ParamStore<f64> {
    let mut out = ParamStore::new();
    for id in ps.ids() {
        let t = ps.value(id);
        let data: Vec<f64> = t.data().iter().map(|v| v.into_f64()).collect();
        out.add(ps.name(id).to_string(), Tensor::new(t.shape().to_vec(), data).unwrap());
    }
    out
}

pub fn tensor_to_f64<S: Scalar>(t: &Tensor<S>) -> Tensor<f64> {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v.into_f64()).collect()).unwrap()
}

/// Computation that can run at any precision over the same parameter set;
/// lets the finite-difference reference run in f64 while the gradients
/// under test come from the checked precision.
pub trait BiPrecision {
    fn run<S: Scalar>(&self, g: &mut Graph<S>, ps: &ParamStore<S>, x: Var) -> Var;
}

/// Checks d(loss)/d(input) and sampled d(loss)/d(params) of `f` at precision
/// `S` against central finite differences evaluated at f64.
pub fn check_biprecision<S: Scalar, F: BiPrecision>(
    name: &str,
    f: &F,
    ps: &ParamStore<S>,
    x0: &Tensor<S>,
    samples_per_param: usize,
    seed: u64,
) {
    let tol = grad_tol::<S>();
    // gradients under test
    let mut x = x0.clone();
    x.requires_grad = true;
    let mut g = Graph::new();
    let xv = g.input(&x);
    let loss = f.run(&mut g, ps, xv);
    let mut grads = ps.clone();
    grads.zero_grads();
    g.backward(loss, &mut grads).expect("backward");
    let ad_input: Vec<f64> = g.input_grad(xv).unwrap().iter().map(|v| v.into_f64()).collect();

    // f64 finite differences
    let ps64 = store_to_f64(ps);
    let x64 = tensor_to_f64(x0);
    let eval = |ps: &ParamStore<f64>, x: &Tensor<f64>| -> f64 {
        let mut g = Graph::new();
        let xv = g.input(x);
        let l = f.run(&mut g, ps, xv);
        g.scalar_value(l)
    };
    let h = 1e-6;
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..x64.numel() {
        let xi = x64.data()[i];
        let hh = h * (1.0 + xi.abs());
        let mut plus = x64.clone();
        plus.data_mut()[i] = xi + hh;
        let mut minus = x64.clone();
        minus.data_mut()[i] = xi - hh;
        let fd = (eval(&ps64, &plus) - eval(&ps64, &minus)) / (2.0 * hh);
        num += (ad_input[i] - fd) * (ad_input[i] - fd);
        den += fd * fd;
    }
    let mut rng = DetRng::new(seed);
    for id in ps.ids() {
        let numel = ps.value(id).numel();
        let picks: Vec<usize> = if numel <= samples_per_param {
            (0..numel).collect()
        } else {
            (0..samples_per_param).map(|_| rng.below(numel)).collect()
        };
        for i in picks {
            let xi = ps64.value(id).data()[i];
            let hh = h * (1.0 + xi.abs());
            let mut plus = ps64.clone();
            plus.value_mut(id).data_mut()[i] = xi + hh;
            let mut minus = ps64.clone();
            minus.value_mut(id).data_mut()[i] = xi - hh;
            let fd = (eval(&plus, &x64) - eval(&minus, &x64)) / (2.0 * hh);
            let ad = grads.grad(id)[i].into_f64();
            num += (ad - fd) * (ad - fd);
            den += fd * fd;
        }
    }
    let rel = num.sqrt() / den.sqrt().max(1e-8);
    assert!(rel <= tol, "{name} ({}-bit): rel err {rel:.3e} > {tol:.1e}", S::BITS);
}
