//! Orthonormal 8x8 type-II DCT and its inverse.

use std::sync::OnceLock;

use crate::scalar::Scalar;

/// Basis matrix M with M[u][n] = a(u) * cos((2n+1) u pi / 16),
/// a(0) = sqrt(1/8), a(u>0) = 1/2. Rows are orthonormal.
pub fn basis() -> &'static [[f64; 8]; 8] {
    static BASIS: OnceLock<[[f64; 8]; 8]> = OnceLock::new();
    BASIS.get_or_init(|| {
        let mut m = [[0.0; 8]; 8];
        for (u, row) in m.iter_mut().enumerate() {
            let a = if u == 0 { (1.0f64 / 8.0).sqrt() } else { 0.5 };
            for (n, v) in row.iter_mut().enumerate() {
                *v = a * ((2 * n + 1) as f64 * u as f64 * std::f64::consts::PI / 16.0).cos();
            }
        }
        m
    })
}

/// 2-D forward transform: Y = M X M^T.
pub fn forward(block: &[[f64; 8]; 8]) -> [[f64; 8]; 8] {
    transform(block, false)
}

/// 2-D inverse transform: X = M^T Y M.
pub fn inverse(coeffs: &[[f64; 8]; 8]) -> [[f64; 8]; 8] {
    transform(coeffs, true)
}

fn transform(x: &[[f64; 8]; 8], inverse: bool) -> [[f64; 8]; 8] {
    let m = basis();
    let mut tmp = [[0.0; 8]; 8];
    // rows of tmp = M x (or M^T x)
    for u in 0..8 {
        for j in 0..8 {
            let mut acc = 0.0;
            for n in 0..8 {
                let w = if inverse { m[n][u] } else { m[u][n] };
                acc += w * x[n][j];
            }
            tmp[u][j] = acc;
        }
    }
    let mut y = [[0.0; 8]; 8];
    for u in 0..8 {
        for v in 0..8 {
            let mut acc = 0.0;
            for n in 0..8 {
                let w = if inverse { m[n][v] } else { m[v][n] };
                acc += w * tmp[u][n];
            }
            y[u][v] = acc;
        }
    }
    y
}

/// Applies the 8x8 transform to every block of every channel of a row-major
/// (C,H,W) buffer. Arithmetic runs in f64 regardless of `S`.
pub fn block_transform_chw<S: Scalar>(
    data: &[S],
    c: usize,
    h: usize,
    w: usize,
    inverse: bool,
) -> Vec<S> {
    debug_assert_eq!(data.len(), c * h * w);
    let mut out = vec![S::zero(); data.len()];
    for ci in 0..c {
        let plane = &data[ci * h * w..(ci + 1) * h * w];
        let dst = ci * h * w;
        for by in (0..h).step_by(8) {
            for bx in (0..w).step_by(8) {
                let mut block = [[0.0f64; 8]; 8];
                for (u, row) in block.iter_mut().enumerate() {
                    for (v, val) in row.iter_mut().enumerate() {
                        *val = plane[(by + u) * w + bx + v].into_f64();
                    }
                }
                let t = transform(&block, inverse);
                for (u, row) in t.iter().enumerate() {
                    for (v, val) in row.iter().enumerate() {
                        out[dst + (by + u) * w + bx + v] = S::from_f64(*val);
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::DetRng;

    #[test]
    fn constant_block_has_only_dc() {
        let block = [[3.25f64; 8]; 8];
        let y = forward(&block);
        assert!((y[0][0] - 8.0 * 3.25).abs() < 1e-12, "DC = 8*v, got {}", y[0][0]);
        for (u, row) in y.iter().enumerate() {
            for (v, &val) in row.iter().enumerate() {
                if (u, v) != (0, 0) {
                    assert!(val.abs() < 1e-12, "AC({u},{v}) = {val}");
                }
            }
        }
    }

    #[test]
    fn round_trip_and_parseval() {
        let mut rng = DetRng::new(99);
        for _ in 0..1000 {
            let mut x = [[0.0f64; 8]; 8];
            let mut energy_x = 0.0;
            for row in x.iter_mut() {
                for v in row.iter_mut() {
                    *v = rng.normal();
                    energy_x += *v * *v;
                }
            }
            let y = forward(&x);
            let energy_y: f64 = y.iter().flatten().map(|v| v * v).sum();
            assert!(
                (energy_x - energy_y).abs() <= 1e-6 * energy_x.max(1.0),
                "energy not preserved"
            );
            let back = inverse(&y);
            for u in 0..8 {
                for v in 0..8 {
                    assert!((back[u][v] - x[u][v]).abs() < 1e-10);
                }
            }
        }
    }
}
