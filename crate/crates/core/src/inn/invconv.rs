//! Invertible 1x1 convolution: one square mixing matrix applied at every
//! spatial position.

use crate::error::TensorError;
use crate::rng::DetRng;
use crate::scalar::Scalar;
use crate::tensor::graph::{condition_1norm, Graph, Var};
use crate::tensor::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const MAX_CONDITION: f64 = 1e6;

#[derive(Debug, Clone)]
pub struct InvConv1x1 {
    pub weight: ParamId,
    pub channels: usize,
}

impl InvConv1x1 {
    /// Identity mixing matrix; keeps a freshly assembled model an exact
    /// identity map.
    pub fn new_identity<S: Scalar>(ps: &mut ParamStore<S>, prefix: &str, channels: usize) -> Self {
        let weight = ps.add(format!("{prefix}.weight"), Tensor::eye(channels));
        InvConv1x1 { weight, channels }
    }

    /// Random orthogonal mixing matrix (Gram-Schmidt on Gaussian columns).
    pub fn new_random_orthogonal<S: Scalar>(
        ps: &mut ParamStore<S>,
        rng: &mut DetRng,
        prefix: &str,
        channels: usize,
    ) -> Self {
        let q = random_orthogonal(channels, rng);
        let weight = ps.add(
            format!("{prefix}.weight"),
            Tensor::from_fn(vec![channels, channels], |i| S::from_f64(q[i])),
        );
        InvConv1x1 { weight, channels }
    }

    fn check_condition<S: Scalar>(&self, ps: &ParamStore<S>) -> Result<(), TensorError> {
        let w64 = ps.value(self.weight).to_f64_vec();
        let cond = condition_1norm(&w64, self.channels)?;
        if cond > MAX_CONDITION {
            return Err(TensorError::IllConditioned { cond });
        }
        Ok(())
    }

    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        ps: &ParamStore<S>,
        x: Var,
    ) -> Result<Var, TensorError> {
        self.check_condition(ps)?;
        let w = g.param(self.weight, ps);
        self.mix(g, w, x)
    }

    pub fn inverse<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        ps: &ParamStore<S>,
        y: Var,
    ) -> Result<Var, TensorError> {
        let w = g.param(self.weight, ps);
        let winv = g.mat_inverse(w)?; // errors when ill-conditioned
        self.mix(g, winv, y)
    }

    fn mix<S: Scalar>(&self, g: &mut Graph<S>, m: Var, x: Var) -> Result<Var, TensorError> {
        let shape = g.shape(x).to_vec();
        let [c, h, w] = match shape.as_slice() {
            [c, h, w] if *c == self.channels => [*c, *h, *w],
            s => {
                return Err(TensorError::ShapeMismatch(format!(
                    "1x1 mixer built for {} channels, got {s:?}",
                    self.channels
                )))
            }
        };
        let flat = g.reshape(x, vec![c, h * w])?;
        let mixed = g.matmul(m, flat)?;
        g.reshape(mixed, vec![c, h, w])
    }
}

/// Row-orthonormal matrix from modified Gram-Schmidt over Gaussian rows.
pub fn random_orthogonal(n: usize, rng: &mut DetRng) -> Vec<f64> {
    loop {
        let mut rows: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.normal()).collect()).collect();
        let mut ok = true;
        for i in 0..n {
            for j in 0..i {
                let dot: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
                let rj = rows[j].clone();
                for (a, b) in rows[i].iter_mut().zip(&rj) {
                    *a -= dot * b;
                }
            }
            let norm: f64 = rows[i].iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            rows[i].iter_mut().for_each(|v| *v /= norm);
        }
        if ok {
            return rows.into_iter().flatten().collect();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_weight_is_identity_map() {
        let mut ps = ParamStore::<f32>::new();
        let conv = InvConv1x1::new_identity(&mut ps, "m", 4);
        let mut g = Graph::new();
        let mut rng = DetRng::new(6);
        let x = g.input(&Tensor::randn(vec![4, 8, 8], 1.0, &mut rng));
        let y = conv.forward(&mut g, &ps, x).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn orthogonal_round_trip_and_transpose_inverse() {
        let mut ps = ParamStore::<f32>::new();
        let mut rng = DetRng::new(7);
        let conv = InvConv1x1::new_random_orthogonal(&mut ps, &mut rng, "m", 6);
        let mut g = Graph::new();
        let x = g.input(&Tensor::randn(vec![6, 8, 8], 1.0, &mut rng));
        let y = conv.forward(&mut g, &ps, x).unwrap();
        let back = conv.inverse(&mut g, &ps, y).unwrap();
        assert!(g.value(back).max_abs_diff(&g.value(x)) <= 1e-5);

        // inverse of an orthogonal matrix is its transpose
        let w = g.param(conv.weight, &ps);
        let winv = g.mat_inverse(w).unwrap();
        let wt = g.transpose2d(w).unwrap();
        assert!(g.value(winv).max_abs_diff(&g.value(wt)) <= 1e-5);
    }

    #[test]
    fn singular_matrix_is_refused() {
        let mut ps = ParamStore::<f64>::new();
        let conv = InvConv1x1::new_identity(&mut ps, "m", 3);
        ps.value_mut(conv.weight).data_mut().iter_mut().for_each(|v| *v = 1.0);
        let mut g = Graph::new();
        let x = g.input(&Tensor::zeros(vec![3, 8, 8]));
        assert!(matches!(
            conv.forward(&mut g, &ps, x),
            Err(TensorError::IllConditioned { .. })
        ));
    }
}
