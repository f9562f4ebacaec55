//! Analytic thoracic phantoms.
//!
//! Anatomy is described in normalized coordinates: position `u` on an axis
//! of `n` voxels maps to voxel `u * (n - 1)`, so one spec rasterizes at any
//! grid size. Axis 0 runs left to right, axis 1 anterior to posterior and
//! axis 2 inferior to superior. Tube, cord and tumor radii are in
//! millimetres. Every shape has a soft edge `edge_width` voxels wide; a zero
//! width gives a piecewise-constant image.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::deformation::DeformationField;
use crate::error::{Error, Result};
use crate::volume::Volume;

pub const LUNG_LEFT: &str = "lung_left";
pub const LUNG_RIGHT: &str = "lung_right";
pub const BODY: &str = "body";
pub const TUMOR: &str = "tumor";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub radii: [f64; 3],
}

/// Elliptic cylinder running along axis 2.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Cylinder {
    pub center: [f64; 2],
    pub radii: [f64; 2],
}

/// Polyline centreline with a constant radius in millimetres.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tube {
    pub name: String,
    pub points: Vec<[f64; 3]>,
    pub radius_mm: f64,
    pub intensity: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tumor {
    pub center: [f64; 3],
    pub radius_mm: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Intensities {
    pub background: f64,
    pub body: f64,
    pub lung: f64,
    pub heart: f64,
    pub cord: f64,
    pub tumor: f64,
}

impl Default for Intensities {
    fn default() -> Self {
        Intensities {
            background: 0.0,
            body: 0.5,
            lung: 0.15,
            heart: 0.62,
            cord: 0.9,
            tumor: 0.45,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub extents: [usize; 3],
    /// Millimetres per voxel.
    pub spacing: [f64; 3],
    pub body: Cylinder,
    /// Left then right lung.
    pub lungs: [Ellipsoid; 2],
    pub heart: Ellipsoid,
    pub cord_center: [f64; 2],
    pub cord_radius_mm: f64,
    pub tubes: Vec<Tube>,
    pub tumors: Vec<Tumor>,
    pub intensities: Intensities,
    pub noise_sigma: f64,
    /// Soft-edge width in voxels.
    pub edge_width: f64,
    /// Amplitude of a smooth sinusoidal texture inside the body. The
    /// texture is part of the anatomy, so it moves under a warp.
    pub texture_amplitude: f64,
    pub texture_seed: u64,
    /// Seed of the per-voxel noise.
    pub seed: u64,
}

fn tube(name: &str, points: &[[f64; 3]], radius_mm: f64, intensity: f64) -> Tube {
    Tube {
        name: name.into(),
        points: points.to_vec(),
        radius_mm,
        intensity,
    }
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            extents: [64, 64, 48],
            spacing: [5.0, 5.0, 5.0],
            body: Cylinder {
                center: [0.5, 0.5],
                radii: [0.46, 0.36],
            },
            lungs: [
                Ellipsoid {
                    center: [0.29, 0.5, 0.52],
                    radii: [0.15, 0.24, 0.36],
                },
                Ellipsoid {
                    center: [0.71, 0.5, 0.52],
                    radii: [0.15, 0.24, 0.36],
                },
            ],
            heart: Ellipsoid {
                center: [0.52, 0.4, 0.32],
                radii: [0.1, 0.11, 0.14],
            },
            cord_center: [0.5, 0.8],
            cord_radius_mm: 9.0,
            tubes: vec![
                tube("trachea", &[[0.5, 0.42, 1.0], [0.5, 0.45, 0.62]], 9.0, 0.05),
                tube(
                    "aorta",
                    &[
                        [0.46, 0.36, 0.35],
                        [0.46, 0.38, 0.7],
                        [0.52, 0.5, 0.8],
                        [0.56, 0.66, 0.7],
                        [0.56, 0.66, 0.05],
                    ],
                    9.0,
                    0.7,
                ),
                tube(
                    "pa",
                    &[[0.5, 0.36, 0.5], [0.45, 0.44, 0.6], [0.38, 0.48, 0.62]],
                    7.0,
                    0.68,
                ),
                tube("ivc", &[[0.57, 0.46, 0.0], [0.57, 0.44, 0.25]], 8.0, 0.66),
            ],
            tumors: Vec::new(),
            intensities: Intensities::default(),
            noise_sigma: 0.0,
            edge_width: 2.0,
            texture_amplitude: 0.03,
            texture_seed: 0,
            seed: 0,
        }
    }
}

/// A rasterized phantom: intensities plus one binary mask per structure.
#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub image: Volume,
    /// `body`, `lung_left`, `lung_right`, `heart`, `cord`, each tube by name
    /// and `tumor` (union of all tumors, possibly empty).
    pub labels: BTreeMap<String, Volume>,
}

impl Phantom {
    pub fn label(&self, name: &str) -> Result<&Volume> {
        self.labels
            .get(name)
            .ok_or_else(|| Error::InvalidPhantom(format!("no structure named {name}")))
    }
}

enum Shape {
    Ellipsoid { c: [f64; 3], r: [f64; 3] },
    Cylinder { c: [f64; 2], r: [f64; 2] },
    Tube { pts: Vec<[f64; 3]>, r: f64 },
    Sphere { c: [f64; 3], r: f64 },
}

impl Shape {
    /// Approximate signed distance in millimetres, negative inside.
    fn sd(&self, x: [f64; 3]) -> f64 {
        match self {
            Shape::Ellipsoid { c, r } => {
                let q: [f64; 3] = std::array::from_fn(|a| (x[a] - c[a]) / r[a]);
                let rho = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2]).sqrt();
                ellipse_sd(rho, &q, r)
            }
            Shape::Cylinder { c, r } => {
                let q = [(x[0] - c[0]) / r[0], (x[1] - c[1]) / r[1], 0.0];
                let rho = (q[0] * q[0] + q[1] * q[1]).sqrt();
                ellipse_sd(rho, &q, &[r[0], r[1], 1.0])
            }
            Shape::Tube { pts, r } => {
                pts.windows(2)
                    .map(|w| segment_distance(x, w[0], w[1]))
                    .fold(f64::INFINITY, f64::min)
                    - r
            }
            Shape::Sphere { c, r } => {
                ((x[0] - c[0]).powi(2) + (x[1] - c[1]).powi(2) + (x[2] - c[2]).powi(2)).sqrt() - r
            }
        }
    }
}

/// First-order distance to the unit level set of `rho`.
fn ellipse_sd(rho: f64, q: &[f64; 3], r: &[f64; 3]) -> f64 {
    if rho < 1e-12 {
        return -r.iter().cloned().fold(f64::INFINITY, f64::min);
    }
    let grad = (0..3).map(|a| (q[a] / r[a]).powi(2)).sum::<f64>().sqrt() / rho;
    (rho - 1.0) / grad
}

fn segment_distance(x: [f64; 3], a: [f64; 3], b: [f64; 3]) -> f64 {
    let ab: [f64; 3] = std::array::from_fn(|i| b[i] - a[i]);
    let ax: [f64; 3] = std::array::from_fn(|i| x[i] - a[i]);
    let len2 = ab.iter().map(|v| v * v).sum::<f64>();
    let t = if len2 > 0.0 {
        (ab.iter().zip(&ax).map(|(p, q)| p * q).sum::<f64>() / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (0..3)
        .map(|i| (ax[i] - t * ab[i]).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Sum of plane waves with wavelengths between 25 and 60 mm.
struct Texture {
    waves: Vec<([f64; 3], f64)>,
    amplitude: f64,
}

impl Texture {
    fn new(spec: &PhantomSpec) -> Texture {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.texture_seed);
        let count = 8;
        let waves = (0..count)
            .map(|_| {
                let dir: [f64; 3] =
                    std::array::from_fn(|_| Normal::new(0.0, 1.0).unwrap().sample(&mut rng));
                let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt().max(1e-9);
                let k = 2.0 * std::f64::consts::PI / rng.random_range(25.0..60.0);
                (
                    dir.map(|d| d / norm * k),
                    rng.random_range(0.0..2.0 * std::f64::consts::PI),
                )
            })
            .collect();
        Texture {
            waves,
            amplitude: spec.texture_amplitude / (count as f64).sqrt(),
        }
    }

    fn at(&self, x: [f64; 3]) -> f64 {
        self.amplitude
            * self
                .waves
                .iter()
                .map(|(k, phase)| (k[0] * x[0] + k[1] * x[1] + k[2] * x[2] + phase).sin())
                .sum::<f64>()
    }
}

struct Layer {
    name: String,
    shape: Shape,
    intensity: f64,
}

impl PhantomSpec {
    /// Same field of view rasterized on a different grid.
    pub fn with_extents(&self, extents: [usize; 3]) -> PhantomSpec {
        let spacing = std::array::from_fn(|a| {
            self.spacing[a] * (self.extents[a] - 1) as f64 / (extents[a].max(2) - 1) as f64
        });
        PhantomSpec {
            extents,
            spacing,
            ..self.clone()
        }
    }

    /// Millimetre position of a normalized coordinate.
    pub fn to_mm(&self, u: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|a| u[a] * (self.extents[a] - 1) as f64 * self.spacing[a])
    }

    fn fov(&self, a: usize) -> f64 {
        (self.extents[a] - 1) as f64 * self.spacing[a]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidPhantom(m));
        if self.extents.iter().any(|&n| n < 2) {
            return bad(format!("extents {:?} too small", self.extents));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return bad(format!("invalid spacing {:?}", self.spacing));
        }
        if !(self.noise_sigma >= 0.0 && self.edge_width >= 0.0 && self.texture_amplitude >= 0.0) {
            return bad("noise, edge width and texture amplitude must be >= 0".into());
        }
        let inside = |c: &[f64]| c.iter().all(|&v| (0.0..=1.0).contains(&v));
        for e in self.lungs.iter().chain([&self.heart]) {
            if !inside(&e.center) || e.radii.iter().any(|&r| r <= 0.0) {
                return bad(format!("ellipsoid {e:?} outside the field of view"));
            }
        }
        for t in &self.tubes {
            if t.points.len() < 2 || t.radius_mm <= 0.0 || !t.points.iter().all(|p| inside(p)) {
                return bad(format!("invalid tube {}", t.name));
            }
        }
        if self.cord_radius_mm <= 0.0 || self.body.radii.iter().any(|&r| r <= 0.0) {
            return bad("radii must be positive".into());
        }
        for t in &self.tumors {
            if t.radius_mm <= 0.0 {
                return bad(format!("tumor radius {} must be positive", t.radius_mm));
            }
            if self.lung_of(t.center).is_none() {
                return bad(format!("tumor center {:?} is not inside a lung", t.center));
            }
        }
        Ok(())
    }

    /// Index of the lung containing a normalized point.
    pub fn lung_of(&self, u: [f64; 3]) -> Option<usize> {
        self.lungs.iter().position(|l| {
            (0..3)
                .map(|a| ((u[a] - l.center[a]) / l.radii[a]).powi(2))
                .sum::<f64>()
                < 1.0
        })
    }

    fn layers(&self) -> Vec<Layer> {
        let ell = |e: &Ellipsoid| Shape::Ellipsoid {
            c: self.to_mm(e.center),
            r: std::array::from_fn(|a| e.radii[a] * self.fov(a)),
        };
        let it = &self.intensities;
        let mut layers = vec![Layer {
            name: BODY.into(),
            shape: Shape::Cylinder {
                c: [
                    self.body.center[0] * self.fov(0),
                    self.body.center[1] * self.fov(1),
                ],
                r: [
                    self.body.radii[0] * self.fov(0),
                    self.body.radii[1] * self.fov(1),
                ],
            },
            intensity: it.body,
        }];
        for (name, lung) in [LUNG_LEFT, LUNG_RIGHT].iter().zip(&self.lungs) {
            layers.push(Layer {
                name: (*name).into(),
                shape: ell(lung),
                intensity: it.lung,
            });
        }
        layers.push(Layer {
            name: "heart".into(),
            shape: ell(&self.heart),
            intensity: it.heart,
        });
        for t in &self.tubes {
            layers.push(Layer {
                name: t.name.clone(),
                shape: Shape::Tube {
                    pts: t.points.iter().map(|&p| self.to_mm(p)).collect(),
                    r: t.radius_mm,
                },
                intensity: t.intensity,
            });
        }
        layers.push(Layer {
            name: "cord".into(),
            shape: Shape::Cylinder {
                c: [
                    self.cord_center[0] * self.fov(0),
                    self.cord_center[1] * self.fov(1),
                ],
                r: [self.cord_radius_mm; 2],
            },
            intensity: it.cord,
        });
        layers
    }

    fn tumor_shapes(&self) -> Vec<Shape> {
        self.tumors
            .iter()
            .map(|t| Shape::Sphere {
                c: self.to_mm(t.center),
                r: t.radius_mm,
            })
            .collect()
    }

    fn membership(&self, sd_mm: f64) -> f64 {
        let mean_spacing = self.spacing.iter().sum::<f64>() / 3.0;
        if self.edge_width == 0.0 {
            return if sd_mm <= 0.0 { 1.0 } else { 0.0 };
        }
        (0.5 - sd_mm / (self.edge_width * mean_spacing)).clamp(0.0, 1.0)
    }
}

/// Rasterize a phantom. When `warp` is given, anatomy is evaluated at
/// `p + warp(p)` (tumors are not warped) so the result equals the plain
/// phantom resampled by `warp`, without interpolation blur.
pub fn rasterize(spec: &PhantomSpec, warp: Option<&DeformationField>) -> Result<Phantom> {
    spec.validate()?;
    if let Some(w) = warp {
        if w.extents() != spec.extents {
            return Err(Error::ExtentMismatch {
                op: "rasterize",
                left: spec.extents.to_vec(),
                right: w.extents().to_vec(),
            });
        }
    }
    let layers = spec.layers();
    let tumors = spec.tumor_shapes();
    let texture = (spec.texture_amplitude > 0.0).then(|| Texture::new(spec));
    let ext = spec.extents;
    let n: usize = ext.iter().product();
    let mut image = vec![0f32; n];
    let mut label = vec![usize::MAX; n];
    let mut body = vec![0f32; n];
    let mut tumor = vec![0f32; n];
    let tumor_label = layers.len();
    for p in 0..n {
        let idx = [p / (ext[1] * ext[2]), (p / ext[2]) % ext[1], p % ext[2]];
        let u = warp.map(|w| w.at(p)).unwrap_or([0.0; 3]);
        let at = |d: [f32; 3]| -> [f64; 3] {
            std::array::from_fn(|a| (idx[a] as f64 + d[a] as f64) * spec.spacing[a])
        };
        let x = at(u);
        let mut v = spec.intensities.background;
        let mut inside_body = 0.0;
        for (k, layer) in layers.iter().enumerate() {
            let a = spec.membership(layer.shape.sd(x));
            v = v * (1.0 - a) + layer.intensity * a;
            if k == 0 {
                inside_body = a;
            }
            if a >= 0.5 {
                label[p] = k;
                if k == 0 {
                    body[p] = 1.0;
                }
            }
        }
        if let Some(t) = &texture {
            v += inside_body * t.at(x);
        }
        let xt = at([0.0; 3]);
        for shape in &tumors {
            let a = spec.membership(shape.sd(xt));
            v = v * (1.0 - a) + spec.intensities.tumor * a;
            if a >= 0.5 {
                label[p] = tumor_label;
                tumor[p] = 1.0;
            }
        }
        image[p] = v as f32;
    }
    if spec.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let normal =
            Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::InvalidPhantom(e.to_string()))?;
        for v in &mut image {
            *v = (*v as f64 + normal.sample(&mut rng)).clamp(0.0, 1.0) as f32;
        }
    }
    let vol = |data: Vec<f32>| Volume::new(ext, spec.spacing, data);
    let mut labels = BTreeMap::new();
    for (k, layer) in layers.iter().enumerate().skip(1) {
        let m = label.iter().map(|&l| (l == k) as u8 as f32).collect();
        labels.insert(layer.name.clone(), vol(m)?);
    }
    labels.insert(BODY.into(), vol(body)?);
    labels.insert(TUMOR.into(), vol(tumor)?);
    Ok(Phantom {
        image: vol(image)?,
        labels,
    })
}

/// Rasterize the undeformed phantom.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    rasterize(spec, None)
}
