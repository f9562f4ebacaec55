//! Scalar 3D volumes (images, masks, dose maps, Jacobian maps) with voxel spacing.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A dense scalar field on a `[D, H, W]` grid, spacing in millimetres.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    extents: [usize; 3],
    spacing: [f64; 3],
    data: Vec<f32>,
}

impl Volume {
    pub fn new(extents: [usize; 3], spacing: [f64; 3], data: Vec<f32>) -> Result<Self> {
        let n: usize = extents.iter().product();
        if n != data.len() || n == 0 {
            return Err(Error::dim(
                "Volume::new",
                format!("extents {extents:?} need {n} values, got {}", data.len()),
            ));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::dim(
                "Volume::new",
                format!("invalid spacing {spacing:?}"),
            ));
        }
        Ok(Volume {
            extents,
            spacing,
            data,
        })
    }

    pub fn filled(extents: [usize; 3], spacing: [f64; 3], value: f32) -> Self {
        let n = extents.iter().product();
        Volume::new(extents, spacing, vec![value; n]).expect("valid extents")
    }

    pub fn zeros(extents: [usize; 3], spacing: [f64; 3]) -> Self {
        Self::filled(extents, spacing, 0.0)
    }

    pub fn from_fn(
        extents: [usize; 3],
        spacing: [f64; 3],
        f: impl Fn(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(extents.iter().product());
        for i in 0..extents[0] {
            for j in 0..extents[1] {
                for k in 0..extents[2] {
                    data.push(f(i, j, k));
                }
            }
        }
        Volume::new(extents, spacing, data).expect("valid extents")
    }

    /// Wrap a single-channel `[1, D, H, W]` tensor.
    pub fn from_tensor(t: &Tensor, spacing: [f64; 3]) -> Result<Self> {
        let s = t.spatial()?;
        if t.shape()[0] != 1 {
            return Err(Error::dim(
                "Volume::from_tensor",
                format!("expected one channel, got {}", t.shape()[0]),
            ));
        }
        Volume::new(s, spacing, t.data().to_vec())
    }

    pub fn to_tensor(&self) -> Tensor {
        let [d, h, w] = self.extents;
        Tensor::new([1, d, h, w], self.data.clone()).unwrap()
    }

    pub fn extents(&self) -> [usize; 3] {
        self.extents
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn with_spacing(mut self, spacing: [f64; 3]) -> Self {
        self.spacing = spacing;
        self
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.extents[1] + j) * self.extents[2] + k
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[self.index(i, j, k)]
    }

    /// Grid coordinates of a linear index.
    #[inline]
    pub fn coords(&self, p: usize) -> [usize; 3] {
        let k = p % self.extents[2];
        let j = (p / self.extents[2]) % self.extents[1];
        let i = p / (self.extents[1] * self.extents[2]);
        [i, j, k]
    }

    pub fn check_same_grid(&self, other: &Volume, op: &'static str) -> Result<()> {
        if self.extents != other.extents {
            return Err(Error::ExtentMismatch {
                op,
                left: self.extents.to_vec(),
                right: other.extents.to_vec(),
            });
        }
        Ok(())
    }

    /// `1` where the value is at least `threshold`, else `0`.
    pub fn binarize(&self, threshold: f32) -> Volume {
        let data = self
            .data
            .iter()
            .map(|&v| if v >= threshold { 1.0 } else { 0.0 })
            .collect();
        Volume {
            extents: self.extents,
            spacing: self.spacing,
            data,
        }
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// Number of voxels at or above 0.5.
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v >= 0.5).count()
    }

    pub fn voxel_volume(&self) -> f64 {
        self.spacing.iter().product()
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Volume {
        Volume {
            extents: self.extents,
            spacing: self.spacing,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn mean_abs_diff(&self, other: &Volume) -> f64 {
        let s: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a as f64 - b as f64).abs())
            .sum();
        s / self.data.len() as f64
    }
}
