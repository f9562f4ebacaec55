//! Trilinear resampling primitives.
//!
//! Voxel centres sit at integer coordinates. Sample coordinates are clamped to
//! `[0, n - 1]` on each axis (zero-flux boundary), and the derivative of a
//! clamped coordinate is zero outside that box.

use super::{Tensor, Var};
use crate::error::{Error, Result};

/// Lower cell index, fractional offset and in-box flag of a coordinate.
#[inline]
fn cell(x: f32, n: usize) -> (usize, usize, f32, bool) {
    if n == 1 {
        return (0, 0, 0.0, x == 0.0);
    }
    let max = (n - 1) as f32;
    let inside = (0.0..=max).contains(&x);
    let xc = x.clamp(0.0, max);
    // xc >= 0, so truncation is floor.
    let i0 = (xc as usize).min(n - 2);
    (i0, i0 + 1, xc - i0 as f32, inside)
}

#[inline]
fn dims(t: &Tensor) -> (usize, [usize; 3]) {
    let s = t.spatial().expect("4D tensor");
    (t.shape()[0], s)
}

/// `out(p) = vol(p + disp(p))`, trilinear, without recording.
pub fn grid_sample_value(vol: &Tensor, disp: &Tensor) -> Result<Tensor> {
    check_grid(vol, disp)?;
    Ok(grid_forward(vol, disp))
}

fn check_grid(vol: &Tensor, disp: &Tensor) -> Result<()> {
    let vs = vol.spatial()?;
    let ds = disp.spatial()?;
    if disp.shape()[0] != 3 {
        return Err(Error::dim(
            "grid_sample",
            format!("displacement needs 3 channels, got {}", disp.shape()[0]),
        ));
    }
    if vs != ds {
        return Err(Error::ExtentMismatch {
            op: "grid_sample",
            left: vs.to_vec(),
            right: ds.to_vec(),
        });
    }
    Ok(())
}

/// Trilinear cell of one sample point: flat index of the lower corner,
/// flat step to the upper corner per axis (zero on singleton axes),
/// fractional offsets and in-box flags.
struct Cell {
    base: usize,
    step: [usize; 3],
    f: [f32; 3],
    inside: [bool; 3],
}

#[inline]
fn locate(x: [f32; 3], s: [usize; 3]) -> Cell {
    let strides = [s[1] * s[2], s[2], 1];
    let mut base = 0;
    let mut step = [0; 3];
    let mut f = [0.0; 3];
    let mut inside = [false; 3];
    for a in 0..3 {
        let (i0, i1, fa, ina) = cell(x[a], s[a]);
        base += i0 * strides[a];
        step[a] = (i1 - i0) * strides[a];
        f[a] = fa;
        inside[a] = ina && s[a] > 1;
    }
    Cell {
        base,
        step,
        f,
        inside,
    }
}

impl Cell {
    /// Values at the eight corners, index bits `(a, b, c)` -> `4a + 2b + c`.
    #[inline]
    fn values(&self, v: &[f32]) -> [f32; 8] {
        let [sx, sy, sz] = self.step;
        let b = self.base;
        [
            v[b],
            v[b + sz],
            v[b + sy],
            v[b + sy + sz],
            v[b + sx],
            v[b + sx + sz],
            v[b + sx + sy],
            v[b + sx + sy + sz],
        ]
    }

    #[inline]
    fn weights(&self) -> [f32; 8] {
        let [fx, fy, fz] = self.f;
        let (gx, gy, gz) = (1.0 - fx, 1.0 - fy, 1.0 - fz);
        [
            gx * gy * gz,
            gx * gy * fz,
            gx * fy * gz,
            gx * fy * fz,
            fx * gy * gz,
            fx * gy * fz,
            fx * fy * gz,
            fx * fy * fz,
        ]
    }

    #[inline]
    fn offsets(&self) -> [usize; 8] {
        let [sx, sy, sz] = self.step;
        let b = self.base;
        [
            b,
            b + sz,
            b + sy,
            b + sy + sz,
            b + sx,
            b + sx + sz,
            b + sx + sy,
            b + sx + sy + sz,
        ]
    }

    #[inline]
    fn interpolate(&self, c: &[f32; 8]) -> f32 {
        let [fx, fy, fz] = self.f;
        // a * (1 - t) + b * t is exact at t = 0 and t = 1.
        let lerp = |a: f32, b: f32, t: f32| a * (1.0 - t) + b * t;
        let (c00, c01) = (lerp(c[0], c[1], fz), lerp(c[2], c[3], fz));
        let (c10, c11) = (lerp(c[4], c[5], fz), lerp(c[6], c[7], fz));
        lerp(lerp(c00, c01, fy), lerp(c10, c11, fy), fx)
    }

    /// Partial derivatives of the interpolant with respect to the sample
    /// coordinate; zero on clamped or singleton axes.
    #[inline]
    fn gradient(&self, c: &[f32; 8]) -> [f32; 3] {
        let [fx, fy, fz] = self.f;
        let (gx, gy, gz) = (1.0 - fx, 1.0 - fy, 1.0 - fz);
        let mut d = [0.0; 3];
        if self.inside[0] {
            d[0] = gy * gz * (c[4] - c[0])
                + gy * fz * (c[5] - c[1])
                + fy * gz * (c[6] - c[2])
                + fy * fz * (c[7] - c[3]);
        }
        if self.inside[1] {
            d[1] = gx * gz * (c[2] - c[0])
                + gx * fz * (c[3] - c[1])
                + fx * gz * (c[6] - c[4])
                + fx * fz * (c[7] - c[5]);
        }
        if self.inside[2] {
            d[2] = gx * gy * (c[1] - c[0])
                + gx * fy * (c[3] - c[2])
                + fx * gy * (c[5] - c[4])
                + fx * fy * (c[7] - c[6]);
        }
        d
    }
}

/// Visit every voxel with its linear index and the cell it samples.
#[inline]
fn for_each_cell(disp: &Tensor, s: [usize; 3], mut f: impl FnMut(usize, Cell)) {
    let (dx, dy, dz) = (disp.channel(0), disp.channel(1), disp.channel(2));
    let mut p = 0;
    for i in 0..s[0] {
        for j in 0..s[1] {
            for k in 0..s[2] {
                let x = [i as f32 + dx[p], j as f32 + dy[p], k as f32 + dz[p]];
                f(p, locate(x, s));
                p += 1;
            }
        }
    }
}

fn grid_forward(vol: &Tensor, disp: &Tensor) -> Tensor {
    let (c, s) = dims(vol);
    let n = s[0] * s[1] * s[2];
    let mut out = vec![0.0f32; c * n];
    let v = vol.data();
    for_each_cell(disp, s, |p, cell| {
        for ch in 0..c {
            out[ch * n + p] = cell.interpolate(&cell.values(&v[ch * n..(ch + 1) * n]));
        }
    });
    Tensor::new(vol.shape().to_vec(), out).unwrap()
}

impl<'t> Var<'t> {
    /// Warp a `[C, D, H, W]` volume by a voxel-unit displacement `[3, D, H, W]`.
    pub fn grid_sample(self, disp: Var<'t>) -> Result<Var<'t>> {
        let vol = self.value();
        let d = disp.value();
        check_grid(&vol, &d)?;
        let y = grid_forward(&vol, &d);
        Ok(self.tape().record(
            y,
            &[self, disp],
            Box::new(move |g, needs| {
                let (c, s) = dims(&vol);
                let n = s[0] * s[1] * s[2];
                let gd = g.data();
                let v = vol.data();
                let mut gvol = needs[0].then(|| vec![0.0f32; c * n]);
                let mut gdisp = needs[1].then(|| vec![0.0f32; 3 * n]);
                for_each_cell(&d, s, |p, cell| {
                    if let Some(gv) = gvol.as_mut() {
                        let w = cell.weights();
                        let off = cell.offsets();
                        for ch in 0..c {
                            let gp = gd[ch * n + p];
                            if gp != 0.0 {
                                let gvc = &mut gv[ch * n..(ch + 1) * n];
                                for q in 0..8 {
                                    gvc[off[q]] += w[q] * gp;
                                }
                            }
                        }
                    }
                    if let Some(gdp) = gdisp.as_mut() {
                        let mut acc = [0.0f32; 3];
                        for ch in 0..c {
                            let gp = gd[ch * n + p];
                            if gp != 0.0 {
                                let dv = cell.gradient(&cell.values(&v[ch * n..(ch + 1) * n]));
                                for a in 0..3 {
                                    acc[a] += gp * dv[a];
                                }
                            }
                        }
                        for a in 0..3 {
                            gdp[a * n + p] = acc[a];
                        }
                    }
                });
                vec![
                    gvol.map(|g| Tensor::new(vol.shape().to_vec(), g).unwrap()),
                    gdisp.map(|g| Tensor::new(d.shape().to_vec(), g).unwrap()),
                ]
            }),
        ))
    }

    /// Trilinear ×2 upsampling (output centre `o` reads input coordinate `o / 2`),
    /// cropped to `extents` when given.
    pub fn upsample2x(self, extents: Option<[usize; 3]>) -> Result<Var<'t>> {
        let x = self.value();
        let src = x.spatial()?;
        let full = [2 * src[0], 2 * src[1], 2 * src[2]];
        let target = extents.unwrap_or(full);
        if (0..3).any(|a| target[a] > full[a] || target[a] == 0) {
            return Err(Error::dim(
                "upsample2x",
                format!("cannot upsample {src:?} to {target:?}"),
            ));
        }
        let y = upsample_forward(&x, target);
        let c = x.shape()[0];
        Ok(self.tape().record(
            y,
            &[self],
            Box::new(move |g, _| {
                let mut gx = vec![0.0f32; c * src.iter().product::<usize>()];
                let taps = axis_taps(src, target);
                let nsrc: usize = src.iter().product();
                let nout: usize = target.iter().product();
                let gd = g.data();
                for ch in 0..c {
                    let mut p = ch * nout;
                    for &(a0, a1, wa) in &taps[0] {
                        for &(b0, b1, wb) in &taps[1] {
                            for &(c0, c1, wc) in &taps[2] {
                                let gp = gd[p];
                                p += 1;
                                let at = |a: usize, b: usize, cc: usize| {
                                    ch * nsrc + (a * src[1] + b) * src[2] + cc
                                };
                                let (ua, ub, uc) = (1.0 - wa, 1.0 - wb, 1.0 - wc);
                                gx[at(a0, b0, c0)] += gp * ua * ub * uc;
                                gx[at(a0, b0, c1)] += gp * ua * ub * wc;
                                gx[at(a0, b1, c0)] += gp * ua * wb * uc;
                                gx[at(a0, b1, c1)] += gp * ua * wb * wc;
                                gx[at(a1, b0, c0)] += gp * wa * ub * uc;
                                gx[at(a1, b0, c1)] += gp * wa * ub * wc;
                                gx[at(a1, b1, c0)] += gp * wa * wb * uc;
                                gx[at(a1, b1, c1)] += gp * wa * wb * wc;
                            }
                        }
                    }
                }
                vec![Some(Tensor::new(x.shape().to_vec(), gx).unwrap())]
            }),
        ))
    }
}

/// Per-axis interpolation taps `(i0, i1, frac)` for ×2 upsampling.
fn axis_taps(src: [usize; 3], target: [usize; 3]) -> [Vec<(usize, usize, f32)>; 3] {
    let taps = |a: usize| {
        (0..target[a])
            .map(|o| {
                let (i0, i1, f, _) = cell(o as f32 * 0.5, src[a]);
                (i0, i1, f)
            })
            .collect::<Vec<_>>()
    };
    [taps(0), taps(1), taps(2)]
}

fn upsample_forward(x: &Tensor, target: [usize; 3]) -> Tensor {
    let (c, src) = dims(x);
    let taps = axis_taps(src, target);
    let nsrc: usize = src.iter().product();
    let mut out = Vec::with_capacity(c * target.iter().product::<usize>());
    let v = x.data();
    for ch in 0..c {
        for &(a0, a1, wa) in &taps[0] {
            for &(b0, b1, wb) in &taps[1] {
                for &(c0, c1, wc) in &taps[2] {
                    let at = |a: usize, b: usize, cc: usize| {
                        v[ch * nsrc + (a * src[1] + b) * src[2] + cc]
                    };
                    let lo = (1.0 - wb) * ((1.0 - wc) * at(a0, b0, c0) + wc * at(a0, b0, c1))
                        + wb * ((1.0 - wc) * at(a0, b1, c0) + wc * at(a0, b1, c1));
                    let hi = (1.0 - wb) * ((1.0 - wc) * at(a1, b0, c0) + wc * at(a1, b0, c1))
                        + wb * ((1.0 - wc) * at(a1, b1, c0) + wc * at(a1, b1, c1));
                    out.push((1.0 - wa) * lo + wa * hi);
                }
            }
        }
    }
    Tensor::new([c, target[0], target[1], target[2]], out).unwrap()
}

/// ×2 trilinear upsampling without recording.
pub fn upsample2x_value(x: &Tensor, extents: Option<[usize; 3]>) -> Result<Tensor> {
    let src = x.spatial()?;
    let target = extents.unwrap_or([2 * src[0], 2 * src[1], 2 * src[2]]);
    if (0..3).any(|a| target[a] > 2 * src[a] || target[a] == 0) {
        return Err(Error::dim(
            "upsample2x",
            format!("cannot upsample {src:?} to {target:?}"),
        ));
    }
    Ok(upsample_forward(x, target))
}
