//! Finite-difference operators on vector fields.

use super::{Tensor, Var};
use crate::error::{Error, Result};

/// Difference stencil along one axis of extent `n` at index `i`:
/// `(lo, hi, scale)` so that `d/dx ~ scale * (f[hi] - f[lo])`.
/// Central in the interior, one-sided at the borders, zero for `n == 1`.
#[inline]
pub(crate) fn stencil(i: usize, n: usize) -> (usize, usize, f32) {
    if n == 1 {
        (0, 0, 0.0)
    } else if i == 0 {
        (0, 1, 1.0)
    } else if i == n - 1 {
        (n - 2, n - 1, 1.0)
    } else {
        (i - 1, i + 1, 0.5)
    }
}

/// `[C, D, H, W] -> [3C, D, H, W]`, channel `3c + a` holding `d u_c / d x_a`.
pub(crate) fn spatial_gradient_value(u: &Tensor) -> Tensor {
    let s = u.spatial().expect("4D tensor");
    let c = u.shape()[0];
    let n = s[0] * s[1] * s[2];
    let strides = [s[1] * s[2], s[2], 1];
    let mut out = vec![0.0f32; 3 * c * n];
    for ch in 0..c {
        let src = u.channel(ch);
        for a in 0..3 {
            let dst = &mut out[(3 * ch + a) * n..(3 * ch + a + 1) * n];
            let mut p = 0;
            for i in 0..s[0] {
                for j in 0..s[1] {
                    for k in 0..s[2] {
                        let idx = [i, j, k][a];
                        let (lo, hi, sc) = stencil(idx, s[a]);
                        let base = p - idx * strides[a];
                        dst[p] = sc * (src[base + hi * strides[a]] - src[base + lo * strides[a]]);
                        p += 1;
                    }
                }
            }
        }
    }
    Tensor::new([3 * c, s[0], s[1], s[2]], out).unwrap()
}

fn spatial_gradient_adjoint(g: &Tensor, c: usize, s: [usize; 3]) -> Tensor {
    let n = s[0] * s[1] * s[2];
    let strides = [s[1] * s[2], s[2], 1];
    let mut out = vec![0.0f32; c * n];
    for ch in 0..c {
        for a in 0..3 {
            let gsrc = g.channel(3 * ch + a);
            let dst = &mut out[ch * n..(ch + 1) * n];
            let mut p = 0;
            for i in 0..s[0] {
                for j in 0..s[1] {
                    for k in 0..s[2] {
                        let idx = [i, j, k][a];
                        let (lo, hi, sc) = stencil(idx, s[a]);
                        let base = p - idx * strides[a];
                        let v = sc * gsrc[p];
                        dst[base + hi * strides[a]] += v;
                        dst[base + lo * strides[a]] -= v;
                        p += 1;
                    }
                }
            }
        }
    }
    Tensor::new([c, s[0], s[1], s[2]], out).unwrap()
}

/// Determinant of `I + G` per voxel, with `G[r][c]` in channel `3r + c`.
fn det_value(g: &Tensor) -> Tensor {
    let s = g.spatial().expect("4D tensor");
    let n = s[0] * s[1] * s[2];
    let ch: Vec<&[f32]> = (0..9).map(|c| g.channel(c)).collect();
    let out = (0..n)
        .map(|p| {
            let m = |r: usize, c: usize| ch[3 * r + c][p] + if r == c { 1.0 } else { 0.0 };
            m(0, 0) * (m(1, 1) * m(2, 2) - m(1, 2) * m(2, 1))
                - m(0, 1) * (m(1, 0) * m(2, 2) - m(1, 2) * m(2, 0))
                + m(0, 2) * (m(1, 0) * m(2, 1) - m(1, 1) * m(2, 0))
        })
        .collect();
    Tensor::new([1, s[0], s[1], s[2]], out).unwrap()
}

impl<'t> Var<'t> {
    /// Spatial gradient of every channel (central differences inside,
    /// one-sided on the border).
    pub fn spatial_gradient(self) -> Result<Var<'t>> {
        let u = self.value();
        let s = u.spatial()?;
        let c = u.shape()[0];
        let y = spatial_gradient_value(&u);
        Ok(self.tape().record(
            y,
            &[self],
            Box::new(move |g, _| vec![Some(spatial_gradient_adjoint(g, c, s))]),
        ))
    }

    /// Per-voxel `det(I + G)` of a `[9, D, H, W]` displacement-gradient field.
    pub fn det_identity_plus(self) -> Result<Var<'t>> {
        let g = self.value();
        g.spatial()?;
        if g.shape()[0] != 9 {
            return Err(Error::dim(
                "det_identity_plus",
                format!("expected 9 gradient channels, got {}", g.shape()[0]),
            ));
        }
        let y = det_value(&g);
        Ok(self.tape().record(
            y,
            &[self],
            Box::new(move |gout, _| {
                let s = g.spatial().unwrap();
                let n = s[0] * s[1] * s[2];
                let ch: Vec<&[f32]> = (0..9).map(|c| g.channel(c)).collect();
                let mut out = vec![0.0f32; 9 * n];
                for p in 0..n {
                    let m = |r: usize, c: usize| ch[3 * r + c][p] + if r == c { 1.0 } else { 0.0 };
                    let gp = gout.data()[p];
                    // d det / d M[r][c] is the cofactor C[r][c]
                    let cof = [
                        m(1, 1) * m(2, 2) - m(1, 2) * m(2, 1),
                        m(1, 2) * m(2, 0) - m(1, 0) * m(2, 2),
                        m(1, 0) * m(2, 1) - m(1, 1) * m(2, 0),
                        m(0, 2) * m(2, 1) - m(0, 1) * m(2, 2),
                        m(0, 0) * m(2, 2) - m(0, 2) * m(2, 0),
                        m(0, 1) * m(2, 0) - m(0, 0) * m(2, 1),
                        m(0, 1) * m(1, 2) - m(0, 2) * m(1, 1),
                        m(0, 2) * m(1, 0) - m(0, 0) * m(1, 2),
                        m(0, 0) * m(1, 1) - m(0, 1) * m(1, 0),
                    ];
                    for (c, v) in cof.iter().enumerate() {
                        out[c * n + p] = gp * v;
                    }
                }
                vec![Some(Tensor::new(g.shape().to_vec(), out).unwrap())]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn gradient_of_linear_field_is_exact_everywhere() {
        let s = [5, 4, 6];
        let mut v = Vec::new();
        for i in 0..s[0] {
            for j in 0..s[1] {
                for k in 0..s[2] {
                    v.push(0.3 * i as f32 - 0.2 * j as f32 + 0.1 * k as f32);
                }
            }
        }
        let u = Tensor::new([1, s[0], s[1], s[2]], v).unwrap();
        let g = spatial_gradient_value(&u);
        for (a, expect) in [0.3f32, -0.2, 0.1].iter().enumerate() {
            assert!(g.channel(a).iter().all(|&x| (x - expect).abs() < 1e-5));
        }
    }

    #[test]
    fn det_of_zero_gradient_is_one() {
        let g = Tensor::zeros([9, 2, 3, 4]);
        assert!(det_value(&g).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn adjoint_of_gradient_matches_inner_product() {
        let tape = Tape::new();
        let vals: Vec<f32> = (0..2 * 3 * 4 * 5)
            .map(|i| ((i * 37 % 17) as f32) * 0.1)
            .collect();
        let u = tape.param(Tensor::new([2, 3, 4, 5], vals).unwrap());
        let gu = u.spatial_gradient().unwrap();
        let w: Vec<f32> = (0..gu.value().len())
            .map(|i| ((i * 13 % 7) as f32) - 3.0)
            .collect();
        let wt = Tensor::new(gu.shape(), w.clone()).unwrap();
        let loss = gu.mul(tape.constant(wt)).unwrap().sum();
        let grads = tape.backward(loss).unwrap();
        let lhs: f64 = gu
            .value()
            .data()
            .iter()
            .zip(&w)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum();
        let rhs: f64 = u
            .value()
            .data()
            .iter()
            .zip(grads.get(u).unwrap().data())
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum();
        assert!((lhs - rhs).abs() < 1e-3);
    }
}
