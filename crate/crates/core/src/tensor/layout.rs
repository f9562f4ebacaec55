//! Channel concatenation/slicing, spatial cropping and per-channel bias for
//! `[C, D, H, W]` tensors.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Concatenate `[C_i, D, H, W]` tensors along the channel axis.
pub fn concat_channels<'t>(tape: &'t Tape, parts: &[Var<'t>]) -> Result<Var<'t>> {
    if parts.is_empty() {
        return Err(Error::dim("concat_channels", "no inputs"));
    }
    let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
    let spatial = values[0].spatial()?;
    let mut channels = Vec::with_capacity(parts.len());
    let mut data = Vec::new();
    for v in &values {
        if v.spatial()? != spatial {
            return Err(Error::ExtentMismatch {
                op: "concat_channels",
                left: values[0].shape().to_vec(),
                right: v.shape().to_vec(),
            });
        }
        channels.push(v.shape()[0]);
        data.extend_from_slice(v.data());
    }
    let total: usize = channels.iter().sum();
    let vox: usize = spatial.iter().product();
    let y = Tensor::new([total, spatial[0], spatial[1], spatial[2]], data)?;
    Ok(tape.record(
        y,
        parts,
        Box::new(move |g, needs| {
            let mut offset = 0;
            channels
                .iter()
                .zip(needs)
                .map(|(&c, &need)| {
                    let start = offset * vox;
                    offset += c;
                    need.then(|| {
                        Tensor::new(
                            [c, spatial[0], spatial[1], spatial[2]],
                            g.data()[start..start + c * vox].to_vec(),
                        )
                        .unwrap()
                    })
                })
                .collect()
        }),
    ))
}

impl<'t> Var<'t> {
    /// Channels `start..start + len` of a `[C, D, H, W]` tensor.
    pub fn slice_channels(self, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        let [d, h, w] = x.spatial()?;
        let c = x.shape()[0];
        if start + len > c || len == 0 {
            return Err(Error::dim(
                "slice_channels",
                format!("range {start}..{} out of {c} channels", start + len),
            ));
        }
        let vox = d * h * w;
        let y = Tensor::new(
            [len, d, h, w],
            x.data()[start * vox..(start + len) * vox].to_vec(),
        )?;
        Ok(self.tape().record(
            y,
            &[self],
            Box::new(move |g, _| {
                let mut full = Tensor::zeros([c, d, h, w]);
                full.data_mut()[start * vox..(start + len) * vox].copy_from_slice(g.data());
                vec![Some(full)]
            }),
        ))
    }

    /// Keep the leading `extents` of each spatial axis.
    pub fn crop_spatial(self, extents: [usize; 3]) -> Result<Var<'t>> {
        let x = self.value();
        let src = x.spatial()?;
        if src == extents {
            return Ok(self);
        }
        if (0..3).any(|a| extents[a] > src[a] || extents[a] == 0) {
            return Err(Error::dim(
                "crop_spatial",
                format!("cannot crop {src:?} to {extents:?}"),
            ));
        }
        let c = x.shape()[0];
        let y = crop_value(&x, extents);
        Ok(self.tape().record(
            y,
            &[self],
            Box::new(move |g, _| {
                let mut full = Tensor::zeros([c, src[0], src[1], src[2]]);
                let [d, h, w] = extents;
                let gd = g.data();
                let fd = full.data_mut();
                for ch in 0..c {
                    for i in 0..d {
                        for j in 0..h {
                            let so = ((ch * src[0] + i) * src[1] + j) * src[2];
                            let go = ((ch * d + i) * h + j) * w;
                            fd[so..so + w].copy_from_slice(&gd[go..go + w]);
                        }
                    }
                }
                vec![Some(full)]
            }),
        ))
    }

    /// Add `bias[c]` to every voxel of channel `c`.
    pub fn add_channel_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        let x = self.value();
        let b = bias.value();
        let [d, h, w] = x.spatial()?;
        let c = x.shape()[0];
        if b.shape() != [c] {
            return Err(Error::dim(
                "add_channel_bias",
                format!("bias shape {:?} for {c} channels", b.shape()),
            ));
        }
        let vox = d * h * w;
        let mut y = (*x).clone();
        for (ch, chunk) in y.data_mut().chunks_mut(vox).enumerate() {
            let bv = b.data()[ch];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        Ok(self.tape().record(
            y,
            &[self, bias],
            Box::new(move |g, needs| {
                let gb = needs[1].then(|| {
                    let sums = g
                        .data()
                        .chunks(vox)
                        .map(|ch| ch.iter().map(|&v| v as f64).sum::<f64>() as f32)
                        .collect();
                    Tensor::new([c], sums).unwrap()
                });
                vec![needs[0].then(|| g.clone()), gb]
            }),
        ))
    }
}

pub(crate) fn crop_value(x: &Tensor, extents: [usize; 3]) -> Tensor {
    let src = x.spatial().expect("4D tensor");
    let c = x.shape()[0];
    let [d, h, w] = extents;
    let mut out = Vec::with_capacity(c * d * h * w);
    for ch in 0..c {
        for i in 0..d {
            for j in 0..h {
                let so = ((ch * src[0] + i) * src[1] + j) * src[2];
                out.extend_from_slice(&x.data()[so..so + w]);
            }
        }
    }
    Tensor::new([c, d, h, w], out).unwrap()
}
