//! Deformation-field algebra in voxel-unit displacement form.
//!
//! A displacement field `u` denotes the map `p -> p + u(p)`; warping an image
//! `I` by `u` produces `I(p + u(p))`. Every operation exists twice: on plain
//! [`DeformationField`]s and on recorded [`Var`]s so losses can differentiate
//! through it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{grid_sample_value, Tensor, Var};
use crate::volume::Volume;

/// Default number of squaring steps.
pub const DEFAULT_INT_STEPS: usize = 7;

fn check_vector_field(op: &'static str, t: &Tensor) -> Result<()> {
    t.spatial()?;
    if t.shape()[0] != 3 {
        return Err(Error::dim(
            op,
            format!("vector field needs 3 channels, got {}", t.shape()[0]),
        ));
    }
    if !t.all_finite() {
        return Err(Error::NonFinite {
            step: 0,
            location: format!("{op} input"),
        });
    }
    Ok(())
}

macro_rules! vector_field {
    ($name:ident, $doc:literal) => {
        #[doc = $doc]
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name(Tensor);

        impl $name {
            pub fn new(t: Tensor) -> Result<Self> {
                check_vector_field(stringify!($name), &t)?;
                Ok($name(t))
            }

            pub fn zeros(extents: [usize; 3]) -> Self {
                $name(Tensor::zeros([3, extents[0], extents[1], extents[2]]))
            }

            /// The same vector at every voxel.
            pub fn constant(extents: [usize; 3], u: [f32; 3]) -> Self {
                Self::from_fn(extents, |_| u)
            }

            pub fn from_fn(extents: [usize; 3], f: impl Fn([f32; 3]) -> [f32; 3]) -> Self {
                let n: usize = extents.iter().product();
                let mut data = vec![0.0f32; 3 * n];
                let mut p = 0;
                for i in 0..extents[0] {
                    for j in 0..extents[1] {
                        for k in 0..extents[2] {
                            let u = f([i as f32, j as f32, k as f32]);
                            for c in 0..3 {
                                data[c * n + p] = u[c];
                            }
                            p += 1;
                        }
                    }
                }
                $name(Tensor::new([3, extents[0], extents[1], extents[2]], data).unwrap())
            }

            pub fn tensor(&self) -> &Tensor {
                &self.0
            }

            pub fn into_tensor(self) -> Tensor {
                self.0
            }

            pub fn extents(&self) -> [usize; 3] {
                self.0.spatial().unwrap()
            }

            /// Vector at linear voxel index `p`.
            pub fn at(&self, p: usize) -> [f32; 3] {
                let n = self.0.len() / 3;
                [
                    self.0.data()[p],
                    self.0.data()[n + p],
                    self.0.data()[2 * n + p],
                ]
            }

            /// Largest per-voxel vector norm.
            pub fn max_norm(&self) -> f32 {
                let n = self.0.len() / 3;
                (0..n)
                    .map(|p| {
                        let u = self.at(p);
                        (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt()
                    })
                    .fold(0.0, f32::max)
            }

            pub fn scaled(&self, c: f32) -> Self {
                $name(self.0.map(|v| v * c))
            }
        }
    };
}

vector_field!(
    VelocityField,
    "Stationary velocity field, voxel units, shape `[3, D, H, W]`."
);
vector_field!(
    DeformationField,
    "Displacement field `phi - Id`, voxel units, shape `[3, D, H, W]`."
);

impl DeformationField {
    pub fn identity(extents: [usize; 3]) -> Self {
        Self::zeros(extents)
    }

    /// Per-voxel Euclidean norm of the displacement.
    pub fn magnitudes(&self) -> Vec<f32> {
        let n = self.0.len() / 3;
        (0..n)
            .map(|p| {
                let u = self.at(p);
                (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt()
            })
            .collect()
    }
}

/// `exp(v)` by scaling and squaring.
pub fn exp_svf(v: &VelocityField, n_int: usize) -> Result<DeformationField> {
    if n_int == 0 {
        return Err(Error::InvalidConfig(
            "integration steps must be >= 1".into(),
        ));
    }
    let scale = 0.5f32.powi(n_int as i32);
    let mut disp = v.tensor().map(|x| x * scale);
    for _ in 0..n_int {
        let sampled = grid_sample_value(&disp, &disp)?;
        disp = disp.zip_map(&sampled, |a, b| a + b);
    }
    DeformationField::new(disp)
}

/// `exp(-v)`, the approximate inverse of `exp(v)`.
pub fn invert_svf(v: &VelocityField, n_int: usize) -> Result<DeformationField> {
    exp_svf(&v.scaled(-1.0), n_int)
}

/// The map `p -> outer(inner(p))`: warping by the result equals warping by
/// `outer` first and then by `inner`.
pub fn compose(outer: &DeformationField, inner: &DeformationField) -> Result<DeformationField> {
    let sampled = grid_sample_value(outer.tensor(), inner.tensor())?;
    DeformationField::new(inner.tensor().zip_map(&sampled, |a, b| a + b))
}

/// Per-voxel `det(grad(p + u(p)))`, central differences inside and one-sided
/// differences on the border.
pub fn jacobian_det(phi: &DeformationField, spacing: [f64; 3]) -> Volume {
    let tape = crate::tensor::Tape::new();
    let det = jacobian_det_var(tape.constant(phi.tensor().clone())).expect("valid field");
    Volume::from_tensor(&det.value(), spacing).expect("single channel")
}

/// Trilinear warp `I(p + u(p))`.
pub fn warp_image(img: &Volume, phi: &DeformationField) -> Result<Volume> {
    check_extents("warp_image", img, phi)?;
    let out = grid_sample_value(&img.to_tensor(), phi.tensor())?;
    Volume::from_tensor(&out, img.spacing())
}

/// Trilinear warp of a mask followed by binarization at `threshold`.
///
/// A sample landing exactly on the threshold takes the value of the nearest
/// voxel, rounding half-way coordinates to even. Without this, a half-voxel
/// shift of a binary mask grows or shrinks every object by one voxel per line.
pub fn warp_mask(mask: &Volume, phi: &DeformationField, threshold: f32) -> Result<Volume> {
    let soft = warp_image(mask, phi)?;
    let s = mask.extents();
    let data = soft
        .data()
        .iter()
        .enumerate()
        .map(|(p, &v)| {
            if v > threshold {
                1.0
            } else if v < threshold {
                0.0
            } else {
                let [i, j, k] = soft.coords(p);
                let u = phi.at(p);
                let near = |x: usize, d: f32, n: usize| {
                    ((x as f32 + d).round_ties_even().max(0.0) as usize).min(n - 1)
                };
                let q = mask.get(
                    near(i, u[0], s[0]),
                    near(j, u[1], s[1]),
                    near(k, u[2], s[2]),
                );
                if q >= threshold {
                    1.0
                } else {
                    0.0
                }
            }
        })
        .collect();
    Volume::new(s, mask.spacing(), data)
}

fn check_extents(op: &'static str, img: &Volume, phi: &DeformationField) -> Result<()> {
    if img.extents() != phi.extents() {
        return Err(Error::ExtentMismatch {
            op,
            left: img.extents().to_vec(),
            right: phi.extents().to_vec(),
        });
    }
    Ok(())
}

/// Recorded scaling and squaring.
pub fn exp_svf_var(v: Var<'_>, n_int: usize) -> Result<Var<'_>> {
    if n_int == 0 {
        return Err(Error::InvalidConfig(
            "integration steps must be >= 1".into(),
        ));
    }
    let mut disp = v.scale(0.5f32.powi(n_int as i32));
    for _ in 0..n_int {
        disp = disp.add(disp.grid_sample(disp)?)?;
    }
    Ok(disp)
}

/// Recorded composition, see [`compose`].
pub fn compose_var<'t>(outer: Var<'t>, inner: Var<'t>) -> Result<Var<'t>> {
    inner.add(outer.grid_sample(inner)?)
}

/// Recorded Jacobian determinant, `[3, D, H, W] -> [1, D, H, W]`.
pub fn jacobian_det_var(disp: Var<'_>) -> Result<Var<'_>> {
    if disp.shape().first() != Some(&3) {
        return Err(Error::dim(
            "jacobian_det",
            format!("shape {:?}", disp.shape()),
        ));
    }
    disp.spatial_gradient()?.det_identity_plus()
}

/// Separable Gaussian smoothing of every channel, clamped borders.
pub fn gaussian_smooth(t: &Tensor, sigma: f64) -> Tensor {
    if sigma <= 0.0 {
        return t.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = taps.iter().sum();
    let taps: Vec<f32> = taps.iter().map(|w| (w / norm) as f32).collect();
    let s = t.spatial().expect("4D tensor");
    let strides = [s[1] * s[2], s[2], 1];
    let mut cur = t.clone();
    for a in 0..3 {
        let src = cur.clone();
        let n = s[a] as isize;
        let data = cur.data_mut();
        let vox = s[0] * s[1] * s[2];
        for (p, out) in data.iter_mut().enumerate() {
            let ch_base = (p / vox) * vox;
            let q = p % vox;
            let idx = ((q / strides[a]) % s[a]) as isize;
            let base = ch_base + q - idx as usize * strides[a];
            let mut acc = 0.0f32;
            for (o, w) in taps.iter().enumerate() {
                let j = (idx + o as isize - radius).clamp(0, n - 1) as usize;
                acc += w * src.data()[base + j * strides[a]];
            }
            *out = acc;
        }
    }
    cur
}

/// Gaussian-smoothed white noise rescaled so the largest vector norm equals
/// `max_norm`. Deterministic per seed.
pub fn random_smooth_velocity(
    extents: [usize; 3],
    sigma: f64,
    max_norm: f32,
    seed: u64,
) -> VelocityField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = extents.iter().product();
    let noise: Vec<f32> = (0..3 * n)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let t = Tensor::new([3, extents[0], extents[1], extents[2]], noise).unwrap();
    let smooth = VelocityField(gaussian_smooth(&t, sigma));
    let m = smooth.max_norm();
    if m == 0.0 {
        return smooth;
    }
    smooth.scaled(max_norm / m)
}
