//! Phantom pairs related by a known stationary velocity field.

use super::phantom::{rasterize, PhantomSpec, Tumor, TUMOR};
use super::RegistrationPair;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use rand_distr::{Distribution, StandardNormal};

use crate::deformation::{exp_svf, VelocityField, DEFAULT_INT_STEPS};
use crate::error::{Error, Result};
use crate::volume::Volume;

/// Which images of a pair carry a tumor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TumorScenario {
    None,
    MovingOnly,
    FixedOnly,
    /// Tumors in mirrored positions of opposite lungs.
    NonCorresponding,
    /// The same tumor at the same position in both images.
    Corresponding,
}

impl TumorScenario {
    pub fn has_moving(self) -> bool {
        matches!(
            self,
            Self::MovingOnly | Self::NonCorresponding | Self::Corresponding
        )
    }

    pub fn has_fixed(self) -> bool {
        matches!(
            self,
            Self::FixedOnly | Self::NonCorresponding | Self::Corresponding
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairSpec {
    /// Anatomy shared by both images; its own tumor list is ignored.
    pub phantom: PhantomSpec,
    pub scenario: TumorScenario,
    pub tumor_radius_mm: f64,
    /// Root-mean-square ground-truth velocity, millimetres.
    pub deformation_rms_mm: f64,
    /// Shortest wavelength of the ground-truth velocity, millimetres.
    pub deformation_wavelength_mm: f64,
    /// Random shift of organ centres and relative change of organ radii in
    /// the fixed image, normalized units. Nonzero jitter means the stored
    /// velocity is no longer the exact ground truth.
    pub anatomy_jitter: f64,
    /// Peak of the synthetic dose centred on the moving tumor, Gy.
    pub dose_peak: f64,
    pub seed: u64,
}

impl Default for PairSpec {
    fn default() -> Self {
        PairSpec {
            phantom: PhantomSpec::default(),
            scenario: TumorScenario::NonCorresponding,
            tumor_radius_mm: 35.0,
            deformation_rms_mm: 10.0,
            deformation_wavelength_mm: 120.0,
            anatomy_jitter: 0.0,
            dose_peak: 60.0,
            seed: 0,
        }
    }
}

impl PairSpec {
    /// Normalized tumor centre for the moving image: a random point in the
    /// inner part of a random lung.
    fn tumor_site(&self, rng: &mut ChaCha8Rng) -> [f64; 3] {
        let lung = &self.phantom.lungs[rng.random_range(0..2)];
        loop {
            let q: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            if q.iter().map(|v| v * v).sum::<f64>() <= 1.0 {
                return std::array::from_fn(|a| lung.center[a] + 0.35 * q[a] * lung.radii[a]);
            }
        }
    }
}

/// Dose falling off as a Gaussian around `center`, normalized coordinates.
pub fn synthetic_dose(spec: &PhantomSpec, center: [f64; 3], sigma_mm: f64, peak: f64) -> Volume {
    let c = spec.to_mm(center);
    Volume::from_fn(spec.extents, spec.spacing, |i, j, k| {
        let x = [i, j, k];
        let d2: f64 = (0..3)
            .map(|a| (x[a] as f64 * spec.spacing[a] - c[a]).powi(2))
            .sum();
        (peak * (-d2 / (2.0 * sigma_mm * sigma_mm)).exp()) as f32
    })
}

/// Smooth velocity built from random plane waves with wavelengths between
/// `min_wavelength_mm` and twice that, scaled to the requested RMS
/// magnitude in millimetres and returned in voxel units.
pub fn wave_velocity(
    spec: &PhantomSpec,
    rms_mm: f64,
    min_wavelength_mm: f64,
    seed: u64,
) -> VelocityField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let waves: Vec<([f64; 3], [f64; 3], f64)> = (0..12)
        .map(|_| {
            let dir: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
            let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt().max(1e-9);
            let k = 2.0 * PI / rng.random_range(min_wavelength_mm..2.0 * min_wavelength_mm);
            let amp: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
            (
                dir.map(|d| d / norm * k),
                amp,
                rng.random_range(0.0..2.0 * PI),
            )
        })
        .collect();
    let field_mm = |x: [f64; 3]| -> [f64; 3] {
        let mut u = [0.0; 3];
        for (k, amp, phase) in &waves {
            let s = (k[0] * x[0] + k[1] * x[1] + k[2] * x[2] + phase).sin();
            for a in 0..3 {
                u[a] += amp[a] * s;
            }
        }
        u
    };
    let h = spec.spacing;
    let raw = VelocityField::from_fn(spec.extents, |p| {
        let u = field_mm(std::array::from_fn(|a| p[a] as f64 * h[a]));
        std::array::from_fn(|a| u[a] as f32)
    });
    let n = raw.tensor().len() / 3;
    let ms = raw
        .tensor()
        .data()
        .iter()
        .map(|&x| (x as f64).powi(2))
        .sum::<f64>()
        / n as f64;
    let scale = if ms > 0.0 { rms_mm / ms.sqrt() } else { 0.0 };
    VelocityField::from_fn(spec.extents, |p| {
        let u = field_mm(std::array::from_fn(|a| p[a] as f64 * h[a]));
        std::array::from_fn(|a| (u[a] * scale / h[a]) as f32)
    })
}

/// Build a pair whose fixed anatomy is the moving anatomy resampled by
/// `exp(v)` for a random smooth `v`, stored as the ground truth. Tumors are
/// drawn afterwards in each image's own frame.
pub fn synth_pair(spec: &PairSpec) -> Result<RegistrationPair> {
    if !(spec.tumor_radius_mm > 0.0
        && spec.deformation_wavelength_mm > 0.0
        && spec.deformation_rms_mm >= 0.0)
    {
        return Err(Error::InvalidPhantom(
            "pair radii and deformation sizes must be positive".into(),
        ));
    }
    let base = &spec.phantom;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let site = spec.tumor_site(&mut rng);
    let mirrored = [1.0 - site[0], site[1], site[2]];
    let tumor = |c: [f64; 3]| Tumor {
        center: c,
        radius_mm: spec.tumor_radius_mm,
    };
    let moving_tumors = if spec.scenario.has_moving() {
        vec![tumor(site)]
    } else {
        vec![]
    };
    let fixed_tumors = match spec.scenario {
        TumorScenario::FixedOnly | TumorScenario::NonCorresponding => vec![tumor(mirrored)],
        TumorScenario::Corresponding => vec![tumor(site)],
        _ => vec![],
    };

    let v = wave_velocity(
        base,
        spec.deformation_rms_mm,
        spec.deformation_wavelength_mm,
        rng.random(),
    );
    let phi = exp_svf(&v, DEFAULT_INT_STEPS)?;

    let moving_spec = PhantomSpec {
        tumors: moving_tumors,
        seed: rng.random(),
        ..base.clone()
    };
    let mut fixed_spec = PhantomSpec {
        tumors: fixed_tumors,
        seed: rng.random(),
        ..base.clone()
    };
    if spec.anatomy_jitter > 0.0 {
        let j = spec.anatomy_jitter;
        for e in fixed_spec.lungs.iter_mut().chain([&mut fixed_spec.heart]) {
            for a in 0..3 {
                e.center[a] += rng.random_range(-j..j);
                e.radii[a] *= 1.0 + rng.random_range(-j..j);
            }
        }
    }
    let moving = rasterize(&moving_spec, None)?;
    let fixed = rasterize(&fixed_spec, Some(&phi))?;

    let dose_center = if spec.scenario.has_moving() {
        site
    } else {
        base.lungs[0].center
    };
    let mut pair = RegistrationPair::new(
        moving.image,
        moving.labels[TUMOR].clone(),
        fixed.image,
        fixed.labels[TUMOR].clone(),
    )?;
    pair.dose = Some(synthetic_dose(
        base,
        dose_center,
        2.0 * spec.tumor_radius_mm,
        spec.dose_peak,
    ));
    pair.gt_velocity = Some(v);
    pair.moving_labels = moving.labels;
    pair.fixed_labels = fixed.labels;
    pair.validate()?;
    Ok(pair)
}

/// `count` pairs with consecutive seeds starting at `spec.seed`.
pub fn synth_dataset(spec: &PairSpec, count: usize) -> Result<Vec<RegistrationPair>> {
    (0..count as u64)
        .map(|i| {
            synth_pair(&PairSpec {
                seed: spec.seed.wrapping_add(i),
                ..spec.clone()
            })
        })
        .collect()
}
