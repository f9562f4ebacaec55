//! 3D convolution (cross-correlation) lowered to im2col + SGEMM.
//!
//! The column buffer is rebuilt in the backward pass instead of being kept on
//! the tape; at full resolution it is an order of magnitude larger than the
//! activation itself.

use super::{Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    input: [usize; 3],
    output: [usize; 3],
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.cin * self.k * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.output.iter().product()
    }
}

fn geometry(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<ConvGeom> {
    let input = x.spatial()?;
    let cin = x.shape()[0];
    let &[cout, wcin, k0, k1, k2] = w.shape() else {
        return Err(Error::dim(
            "conv3d",
            format!("kernel must be [C_out, C_in, k, k, k], got {:?}", w.shape()),
        ));
    };
    if wcin != cin {
        return Err(Error::dim(
            "conv3d",
            format!("input has {cin} channels but kernel expects {wcin}"),
        ));
    }
    if k0 != k1 || k1 != k2 || k0 % 2 == 0 {
        return Err(Error::dim(
            "conv3d",
            format!("kernel must be cubic with odd size, got {k0}x{k1}x{k2}"),
        ));
    }
    if !(1..=2).contains(&stride) {
        return Err(Error::dim("conv3d", format!("unsupported stride {stride}")));
    }
    let k = k0;
    let mut output = [0; 3];
    for a in 0..3 {
        let span = input[a] + 2 * pad;
        if span < k {
            return Err(Error::dim(
                "conv3d",
                format!("extent {} too small for kernel {k}", input[a]),
            ));
        }
        output[a] = (span - k) / stride + 1;
    }
    Ok(ConvGeom {
        cin,
        cout,
        k,
        stride,
        pad,
        input,
        output,
    })
}

/// For output index `o` along one axis and kernel tap `t`, the input index.
#[inline]
fn src_index(o: usize, t: usize, g: &ConvGeom, extent: usize) -> Option<usize> {
    let i = (o * g.stride + t) as isize - g.pad as isize;
    (0..extent as isize).contains(&i).then_some(i as usize)
}

fn im2col(x: &[f32], g: &ConvGeom) -> Vec<f32> {
    let n = g.cols();
    let [d, h, w] = g.input;
    let [od, oh, ow] = g.output;
    let k = g.k;
    let mut cols = vec![0.0f32; g.rows() * n];
    for ci in 0..g.cin {
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let row = ((ci * k + kd) * k + kh) * k + kw;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    for z in 0..od {
                        let Some(iz) = src_index(z, kd, g, d) else {
                            continue;
                        };
                        for y in 0..oh {
                            let Some(iy) = src_index(y, kh, g, h) else {
                                continue;
                            };
                            let base = ((ci * d + iz) * h + iy) * w;
                            let drow = &mut dst[(z * oh + y) * ow..(z * oh + y + 1) * ow];
                            if g.stride == 1 {
                                // valid xo satisfy 0 <= xo + kw - pad < w
                                let lo = g.pad.saturating_sub(kw);
                                let hi = (w + g.pad).saturating_sub(kw).min(ow);
                                if lo < hi {
                                    let s = base + lo + kw - g.pad;
                                    drow[lo..hi].copy_from_slice(&x[s..s + (hi - lo)]);
                                }
                            } else {
                                for (xo, v) in drow.iter_mut().enumerate() {
                                    if let Some(ix) = src_index(xo, kw, g, w) {
                                        *v = x[base + ix];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f32], g: &ConvGeom) -> Vec<f32> {
    let n = g.cols();
    let [d, h, w] = g.input;
    let [od, oh, ow] = g.output;
    let k = g.k;
    let mut x = vec![0.0f32; g.cin * d * h * w];
    for ci in 0..g.cin {
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let row = ((ci * k + kd) * k + kh) * k + kw;
                    let src = &cols[row * n..(row + 1) * n];
                    for z in 0..od {
                        let Some(iz) = src_index(z, kd, g, d) else {
                            continue;
                        };
                        for y in 0..oh {
                            let Some(iy) = src_index(y, kh, g, h) else {
                                continue;
                            };
                            let base = ((ci * d + iz) * h + iy) * w;
                            let srow = &src[(z * oh + y) * ow..(z * oh + y + 1) * ow];
                            if g.stride == 1 {
                                let lo = g.pad.saturating_sub(kw);
                                let hi = (w + g.pad).saturating_sub(kw).min(ow);
                                if lo < hi {
                                    let s = base + lo + kw - g.pad;
                                    for (dst, &v) in
                                        x[s..s + (hi - lo)].iter_mut().zip(&srow[lo..hi])
                                    {
                                        *dst += v;
                                    }
                                }
                            } else {
                                for (xo, &v) in srow.iter().enumerate() {
                                    if let Some(ix) = src_index(xo, kw, g, w) {
                                        x[base + ix] += v;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// `c = op(a) * op(b) + beta * c` for row-major matrices, where `op` is an
/// optional transpose. `a` is `m x k` after `op`, `b` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_trans: bool,
    b: &[f32],
    b_trans: bool,
    beta: f32,
    c: &mut [f32],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_trans {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the three slices, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Forward convolution without recording: `[C_in, D, H, W] * [C_out, C_in, k, k, k]`.
pub fn conv3d_value(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let g = geometry(x, w, stride, pad)?;
    Ok(forward(x, w, &g))
}

fn forward(x: &Tensor, w: &Tensor, g: &ConvGeom) -> Tensor {
    let n = g.cols();
    let mut out = vec![0.0f32; g.cout * n];
    if g.k == 1 && g.stride == 1 && g.pad == 0 {
        gemm(
            g.cout,
            g.rows(),
            n,
            w.data(),
            false,
            x.data(),
            false,
            0.0,
            &mut out,
        );
    } else {
        let cols = im2col(x.data(), g);
        gemm(
            g.cout,
            g.rows(),
            n,
            w.data(),
            false,
            &cols,
            false,
            0.0,
            &mut out,
        );
    }
    let [od, oh, ow] = g.output;
    Tensor::new([g.cout, od, oh, ow], out).unwrap()
}

impl<'t> Var<'t> {
    /// 3D convolution with a cubic odd kernel, zero padding and stride 1 or 2.
    pub fn conv3d(self, kernel: Var<'t>, stride: usize, pad: usize) -> Result<Var<'t>> {
        let x = self.value();
        let w = kernel.value();
        let g = geometry(&x, &w, stride, pad)?;
        let y = forward(&x, &w, &g);
        Ok(self.tape().record(
            y,
            &[self, kernel],
            Box::new(move |gout, needs| {
                let n = g.cols();
                let direct = g.k == 1 && g.stride == 1 && g.pad == 0;
                let cols_owned;
                let cols: &[f32] = if direct {
                    x.data()
                } else {
                    cols_owned = im2col(x.data(), &g);
                    &cols_owned
                };
                let gw = needs[1].then(|| {
                    let mut gw = vec![0.0f32; g.cout * g.rows()];
                    gemm(
                        g.cout,
                        n,
                        g.rows(),
                        gout.data(),
                        false,
                        cols,
                        true,
                        0.0,
                        &mut gw,
                    );
                    Tensor::new(w.shape().to_vec(), gw).unwrap()
                });
                let gx = needs[0].then(|| {
                    let mut gcols = vec![0.0f32; g.rows() * n];
                    gemm(
                        g.rows(),
                        g.cout,
                        n,
                        w.data(),
                        true,
                        gout.data(),
                        false,
                        0.0,
                        &mut gcols,
                    );
                    let data = if direct { gcols } else { col2im(&gcols, &g) };
                    Tensor::new(x.shape().to_vec(), data).unwrap()
                });
                vec![gx, gw]
            }),
        ))
    }
}
