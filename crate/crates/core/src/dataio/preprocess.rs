//! Crop to the body and resample to a working grid, keeping the transform so
//! results can be carried back to the original volumes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::RegistrationPair;
use crate::deformation::{DeformationField, VelocityField};
use crate::error::{Error, Result};
use crate::volume::Volume;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub target_extents: [usize; 3],
    /// Physical margin kept around the body bounding box, millimetres.
    pub margin_mm: f64,
    /// Voxels with intensity above this belong to the body.
    pub body_threshold: f32,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            target_extents: [32, 32, 24],
            margin_mm: 100.0,
            body_threshold: 0.1,
        }
    }
}

/// Axis-aligned crop followed by an align-corners resampling: target voxel
/// `o` sits at source coordinate `origin + o * scale`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResampleTransform {
    pub source_extents: [usize; 3],
    pub source_spacing: [f64; 3],
    pub origin: [usize; 3],
    pub crop_extents: [usize; 3],
    pub target_extents: [usize; 3],
}

/// Trilinear sample with clamped coordinates; exact at integer positions.
fn sample(data: &[f32], s: [usize; 3], x: [f64; 3]) -> f64 {
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    let mut f = [0f64; 3];
    for a in 0..3 {
        let max = (s[a] - 1) as f64;
        let xc = x[a].clamp(0.0, max);
        let i0 = (xc as usize).min(s[a].saturating_sub(2));
        lo[a] = i0;
        hi[a] = (i0 + 1).min(s[a] - 1);
        f[a] = xc - i0 as f64;
    }
    let at = |i: usize, j: usize, k: usize| data[(i * s[1] + j) * s[2] + k] as f64;
    let lerp = |a: f64, b: f64, t: f64| a * (1.0 - t) + b * t;
    let c = |i: usize| {
        lerp(
            lerp(at(i, lo[1], lo[2]), at(i, lo[1], hi[2]), f[2]),
            lerp(at(i, hi[1], lo[2]), at(i, hi[1], hi[2]), f[2]),
            f[1],
        )
    };
    lerp(c(lo[0]), c(hi[0]), f[0])
}

impl ResampleTransform {
    pub fn identity(extents: [usize; 3], spacing: [f64; 3]) -> Self {
        ResampleTransform {
            source_extents: extents,
            source_spacing: spacing,
            origin: [0; 3],
            crop_extents: extents,
            target_extents: extents,
        }
    }

    /// Source voxels per target voxel along each axis.
    pub fn scale(&self) -> [f64; 3] {
        std::array::from_fn(|a| {
            if self.target_extents[a] > 1 {
                (self.crop_extents[a] - 1) as f64 / (self.target_extents[a] - 1) as f64
            } else {
                1.0
            }
        })
    }

    pub fn target_spacing(&self) -> [f64; 3] {
        let s = self.scale();
        std::array::from_fn(|a| self.source_spacing[a] * s[a])
    }

    fn to_source(&self, o: [f64; 3]) -> [f64; 3] {
        let s = self.scale();
        std::array::from_fn(|a| self.origin[a] as f64 + o[a] * s[a])
    }

    fn to_target(&self, x: [f64; 3]) -> [f64; 3] {
        let s = self.scale();
        std::array::from_fn(|a| (x[a] - self.origin[a] as f64) / s[a])
    }

    fn check(&self, v: &Volume, expect: [usize; 3], op: &'static str) -> Result<()> {
        if v.extents() != expect {
            return Err(Error::ExtentMismatch {
                op,
                left: expect.to_vec(),
                right: v.extents().to_vec(),
            });
        }
        Ok(())
    }

    pub fn forward_image(&self, v: &Volume) -> Result<Volume> {
        self.check(v, self.source_extents, "forward_image")?;
        Ok(Volume::from_fn(
            self.target_extents,
            self.target_spacing(),
            |i, j, k| {
                sample(
                    v.data(),
                    self.source_extents,
                    self.to_source([i as f64, j as f64, k as f64]),
                ) as f32
            },
        ))
    }

    /// Trilinear resampling thresholded at 0.5.
    pub fn forward_mask(&self, m: &Volume) -> Result<Volume> {
        Ok(self.forward_image(m)?.binarize(0.5))
    }

    pub fn inverse_image(&self, v: &Volume) -> Result<Volume> {
        self.check(v, self.target_extents, "inverse_image")?;
        Ok(Volume::from_fn(
            self.source_extents,
            self.source_spacing,
            |i, j, k| {
                sample(
                    v.data(),
                    self.target_extents,
                    self.to_target([i as f64, j as f64, k as f64]),
                ) as f32
            },
        ))
    }

    pub fn inverse_mask(&self, m: &Volume) -> Result<Volume> {
        Ok(self.inverse_image(m)?.binarize(0.5))
    }

    /// A velocity on the source grid, converted to target voxel units.
    pub fn forward_velocity(&self, v: &VelocityField) -> Result<VelocityField> {
        if v.extents() != self.source_extents {
            return Err(Error::ExtentMismatch {
                op: "forward_velocity",
                left: self.source_extents.to_vec(),
                right: v.extents().to_vec(),
            });
        }
        let s = self.scale();
        let n: usize = self.source_extents.iter().product();
        let comps: Vec<&[f32]> = (0..3)
            .map(|c| &v.tensor().data()[c * n..(c + 1) * n])
            .collect();
        Ok(VelocityField::from_fn(self.target_extents, |o| {
            let x = self.to_source(o.map(f64::from));
            std::array::from_fn(|c| (sample(comps[c], self.source_extents, x) / s[c]) as f32)
        }))
    }

    /// A displacement on the target grid carried back to the source grid,
    /// in source voxel units. Outside the crop the nearest value is used.
    pub fn inverse_field(&self, phi: &DeformationField) -> Result<DeformationField> {
        if phi.extents() != self.target_extents {
            return Err(Error::ExtentMismatch {
                op: "inverse_field",
                left: self.target_extents.to_vec(),
                right: phi.extents().to_vec(),
            });
        }
        let s = self.scale();
        let n: usize = self.target_extents.iter().product();
        let comps: Vec<&[f32]> = (0..3)
            .map(|c| &phi.tensor().data()[c * n..(c + 1) * n])
            .collect();
        Ok(DeformationField::from_fn(self.source_extents, |x| {
            let l = self.to_target(x.map(f64::from));
            std::array::from_fn(|c| (sample(comps[c], self.target_extents, l) * s[c]) as f32)
        }))
    }
}

/// Bounding box of voxels above `threshold`, grown by `margin_mm` and clipped
/// to the grid. Returns `(origin, extents)`.
pub fn body_box(v: &Volume, threshold: f32, margin_mm: f64) -> Result<([usize; 3], [usize; 3])> {
    let s = v.extents();
    let mut lo = s;
    let mut hi = [0usize; 3];
    let mut any = false;
    for (p, &x) in v.data().iter().enumerate() {
        if x > threshold {
            any = true;
            let c = v.coords(p);
            for a in 0..3 {
                lo[a] = lo[a].min(c[a]);
                hi[a] = hi[a].max(c[a]);
            }
        }
    }
    if !any {
        return Err(Error::EmptyMask(format!(
            "no body voxels above {threshold}"
        )));
    }
    let h = v.spacing();
    let mut origin = [0; 3];
    let mut ext = [0; 3];
    for a in 0..3 {
        let m = (margin_mm / h[a]).ceil().max(0.0) as usize;
        origin[a] = lo[a].saturating_sub(m);
        let end = (hi[a] + m).min(s[a] - 1);
        ext[a] = end - origin[a] + 1;
    }
    Ok((origin, ext))
}

fn union_box(a: ([usize; 3], [usize; 3]), b: ([usize; 3], [usize; 3])) -> ([usize; 3], [usize; 3]) {
    let lo: [usize; 3] = std::array::from_fn(|i| a.0[i].min(b.0[i]));
    let hi: [usize; 3] = std::array::from_fn(|i| (a.0[i] + a.1[i]).max(b.0[i] + b.1[i]));
    (lo, std::array::from_fn(|i| hi[i] - lo[i]))
}

/// The transform that crops `v` to its body and resamples to the target grid.
pub fn plan(v: &Volume, cfg: &PreprocessConfig) -> Result<ResampleTransform> {
    if cfg.target_extents.contains(&0) {
        return Err(Error::InvalidConfig(
            "target extents must be positive".into(),
        ));
    }
    let (origin, crop) = body_box(v, cfg.body_threshold, cfg.margin_mm)?;
    Ok(ResampleTransform {
        source_extents: v.extents(),
        source_spacing: v.spacing(),
        origin,
        crop_extents: crop,
        target_extents: cfg.target_extents,
    })
}

/// Crop and resample one image and its masks.
pub fn preprocess(
    v: &Volume,
    masks: &BTreeMap<String, Volume>,
    cfg: &PreprocessConfig,
) -> Result<(Volume, BTreeMap<String, Volume>, ResampleTransform)> {
    let t = plan(v, cfg)?;
    let masks = masks
        .iter()
        .map(|(k, m)| Ok((k.clone(), t.forward_mask(m)?)))
        .collect::<Result<_>>()?;
    Ok((t.forward_image(v)?, masks, t))
}

/// Crop both images of a pair to the union of their body boxes and resample
/// everything (masks, labels, dose, ground-truth velocity) with one transform.
pub fn preprocess_pair(
    pair: &RegistrationPair,
    cfg: &PreprocessConfig,
) -> Result<(RegistrationPair, ResampleTransform)> {
    let a = plan(&pair.moving, cfg)?;
    let b = plan(&pair.fixed, cfg)?;
    let (origin, crop_extents) = union_box((a.origin, a.crop_extents), (b.origin, b.crop_extents));
    let t = ResampleTransform {
        origin,
        crop_extents,
        ..a
    };
    let labels = |m: &BTreeMap<String, Volume>| -> Result<BTreeMap<String, Volume>> {
        m.iter()
            .map(|(k, v)| Ok((k.clone(), t.forward_mask(v)?)))
            .collect()
    };
    let mut out = RegistrationPair::new(
        t.forward_image(&pair.moving)?,
        t.forward_mask(&pair.moving_mask)?,
        t.forward_image(&pair.fixed)?,
        t.forward_mask(&pair.fixed_mask)?,
    )?;
    out.dose = pair.dose.as_ref().map(|d| t.forward_image(d)).transpose()?;
    out.gt_velocity = pair
        .gt_velocity
        .as_ref()
        .map(|v| t.forward_velocity(v))
        .transpose()?;
    out.moving_labels = labels(&pair.moving_labels)?;
    out.fixed_labels = labels(&pair.fixed_labels)?;
    Ok((out, t))
}

/// Clip Hounsfield units to `[-1000, 1000]` and map them linearly to `[0, 1]`.
pub fn normalize_hu(v: &Volume) -> Volume {
    v.map(|hu| (hu.clamp(-1000.0, 1000.0) + 1000.0) / 2000.0)
}
