//! Tumor-conditioned registration objective.
//!
//! All terms operate on recorded [`Var`]s so the objective can be
//! differentiated with respect to whatever produced the deformations (network
//! weights or free velocity fields).

use serde::{Deserialize, Serialize};

use crate::deformation::jacobian_det_var;
use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var};

/// A mask whose total weight falls below this is treated as empty.
const EMPTY_MASK_WEIGHT: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_smooth: f64,
    pub lambda_pre: f64,
    pub lambda_ob: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_smooth: 25.0,
            lambda_pre: 1000.0,
            lambda_ob: 1000.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_smooth", self.lambda_smooth),
            ("lambda_pre", self.lambda_pre),
            ("lambda_ob", self.lambda_ob),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// How the smoothness sum over voxels is scaled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmoothnessMode {
    /// Mean over voxels with each displacement component measured in
    /// normalized grid units, where the axis spans `[-1, 1]`.
    #[default]
    GridUnits,
    /// Mean over voxels, displacements in voxels.
    Normalized,
    /// Plain sum over voxels, displacements in voxels.
    Raw,
}

/// Recorded quantities of one recurrent step.
///
/// `phi` warps the previous moving image onto the fixed grid. The inverse
/// chain maps the fixed image into the original moving frame.
#[derive(Clone, Copy)]
pub struct StepVars<'t> {
    /// Per-step displacement `phi^t`.
    pub phi: Var<'t>,
    /// Per-step inverse displacement `exp(-v^t)`.
    pub phi_hat: Var<'t>,
    /// Moving image after step `t`.
    pub warped_moving: Var<'t>,
    /// Soft moving tumor mask after step `t`.
    pub warped_moving_mask: Var<'t>,
    /// Soft moving tumor mask entering step `t`.
    pub prev_moving_mask: Var<'t>,
    /// Fixed image carried into the moving frame by the inverse chain.
    pub warped_fixed: Var<'t>,
    /// Fixed tumor mask carried into the moving frame by the inverse chain.
    pub warped_fixed_mask: Var<'t>,
    /// Fixed tumor mask expressed on the grid `phi_hat` maps into; the
    /// obliteration penalty is taken over these voxels.
    pub ob_mask: Var<'t>,
}

/// The original pair as tape leaves.
#[derive(Clone, Copy)]
pub struct PairVars<'t> {
    pub moving: Var<'t>,
    pub moving_mask: Var<'t>,
    pub fixed: Var<'t>,
    pub fixed_mask: Var<'t>,
}

/// Per-term values of one objective evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub sim: f64,
    pub sim_inv: f64,
    pub smooth: f64,
    pub smooth_inv: f64,
    pub pre: f64,
    pub ob: f64,
    pub total: f64,
    /// Some step had an empty moving tumor mask; its preservation term was 0.
    pub empty_moving_tumor: bool,
    /// Some step had an empty fixed tumor mask; its obliteration term was 0.
    pub empty_fixed_tumor: bool,
}

impl LossBreakdown {
    /// The weighted sum of the per-term values.
    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        self.sim
            + self.sim_inv
            + w.lambda_smooth * (self.smooth + self.smooth_inv)
            + w.lambda_pre * self.pre
            + w.lambda_ob * self.ob
    }

    /// Element-wise mean of several breakdowns.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let mut m = LossBreakdown::default();
        for b in items {
            m.sim += b.sim / n;
            m.sim_inv += b.sim_inv / n;
            m.smooth += b.smooth / n;
            m.smooth_inv += b.smooth_inv / n;
            m.pre += b.pre / n;
            m.ob += b.ob / n;
            m.total += b.total / n;
            m.empty_moving_tumor |= b.empty_moving_tumor;
            m.empty_fixed_tumor |= b.empty_fixed_tumor;
        }
        m
    }
}

fn check_nonempty(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidConfig("loss needs at least one step".into()));
    }
    Ok(())
}

fn mean_over_steps<'t>(terms: Vec<Var<'t>>) -> Result<Var<'t>> {
    let n = terms.len();
    let mut acc = terms[0];
    for t in &terms[1..] {
        acc = acc.add(*t)?;
    }
    Ok(acc.scale(1.0 / n as f32))
}

/// Mean over steps of the voxel-mean of
/// `((1 - y_ref)(1 - y_t)(I_ref - I_t))^2`.
///
/// Voxels inside either tumor mask are excluded, so images that differ only
/// within the union of the masks score 0.
pub fn masked_similarity<'t>(
    images: &[Var<'t>],
    masks: &[Var<'t>],
    reference: Var<'t>,
    reference_mask: Var<'t>,
) -> Result<Var<'t>> {
    check_nonempty(images.len())?;
    if images.len() != masks.len() {
        return Err(Error::dim(
            "masked_similarity",
            format!("{} images but {} masks", images.len(), masks.len()),
        ));
    }
    let keep_ref = reference_mask.one_minus();
    let terms = images
        .iter()
        .zip(masks)
        .map(|(&img, &mask)| {
            let keep = keep_ref.mul(mask.one_minus())?;
            Ok(reference.sub(img)?.mul(keep)?.square().mean())
        })
        .collect::<Result<Vec<_>>>()?;
    mean_over_steps(terms)
}

/// Mean over steps of the squared spatial gradient of each displacement.
pub fn smoothness<'t>(fields: &[Var<'t>], mode: SmoothnessMode) -> Result<Var<'t>> {
    check_nonempty(fields.len())?;
    let terms = fields
        .iter()
        .map(|&u| {
            let vox = u.value().len() / u.shape()[0];
            Ok(match mode {
                SmoothnessMode::Raw => u.spatial_gradient()?.square().sum(),
                SmoothnessMode::Normalized => {
                    u.spatial_gradient()?.square().sum().scale(1.0 / vox as f32)
                }
                SmoothnessMode::GridUnits => {
                    let shape = u.shape();
                    let factors: Vec<f32> = (0..shape[0])
                        .flat_map(|c| {
                            let n = shape[1 + c.min(2)];
                            std::iter::repeat_n(2.0 / (n.max(2) - 1) as f32, vox)
                        })
                        .collect();
                    let f = u.tape().constant(Tensor::new(shape, factors)?);
                    u.mul(f)?
                        .spatial_gradient()?
                        .square()
                        .sum()
                        .scale(1.0 / vox as f32)
                }
            })
        })
        .collect::<Result<Vec<_>>>()?;
    mean_over_steps(terms)
}

/// Mean over steps of the mask-weighted mean of `(det(I + grad u) - 1)^2`.
///
/// A step whose mask is empty contributes 0; the returned flag reports whether
/// that happened.
pub fn rigidity<'t>(fields: &[Var<'t>], masks: &[Var<'t>]) -> Result<(Var<'t>, bool)> {
    check_nonempty(fields.len())?;
    if fields.len() != masks.len() {
        return Err(Error::dim(
            "rigidity",
            format!("{} fields but {} masks", fields.len(), masks.len()),
        ));
    }
    let mut empty = false;
    let mut terms = Vec::with_capacity(fields.len());
    for (&u, &mask) in fields.iter().zip(masks) {
        let weight = mask.sum();
        if weight.item() < EMPTY_MASK_WEIGHT {
            empty = true;
            terms.push(u.tape().constant(Tensor::scalar(0.0)));
            continue;
        }
        let dev = jacobian_det_var(u)?.add_scalar(-1.0).square();
        terms.push(dev.mul(mask)?.sum().div(weight)?);
    }
    Ok((mean_over_steps(terms)?, empty))
}

/// Rigidity of the forward per-step flows over the moving tumor entering
/// each step.
pub fn tumor_preservation<'t>(steps: &[StepVars<'t>]) -> Result<(Var<'t>, bool)> {
    let fields: Vec<_> = steps.iter().map(|s| s.phi).collect();
    let masks: Vec<_> = steps.iter().map(|s| s.prev_moving_mask).collect();
    rigidity(&fields, &masks)
}

/// Rigidity of the inverse per-step flows over the fixed tumor.
pub fn tumor_obliteration<'t>(steps: &[StepVars<'t>]) -> Result<(Var<'t>, bool)> {
    let fields: Vec<_> = steps.iter().map(|s| s.phi_hat).collect();
    let masks: Vec<_> = steps.iter().map(|s| s.ob_mask).collect();
    rigidity(&fields, &masks)
}

/// Recorded terms before weighting.
#[derive(Clone, Copy)]
pub struct LossTerms<'t> {
    pub sim: Var<'t>,
    pub sim_inv: Var<'t>,
    pub smooth: Var<'t>,
    pub smooth_inv: Var<'t>,
    pub pre: Var<'t>,
    pub ob: Var<'t>,
    pub empty_moving_tumor: bool,
    pub empty_fixed_tumor: bool,
}

impl<'t> LossTerms<'t> {
    pub fn compute(
        pair: &PairVars<'t>,
        steps: &[StepVars<'t>],
        mode: SmoothnessMode,
    ) -> Result<Self> {
        check_nonempty(steps.len())?;
        let col = |f: fn(&StepVars<'t>) -> Var<'t>| steps.iter().map(f).collect::<Vec<_>>();
        let sim = masked_similarity(
            &col(|s| s.warped_moving),
            &col(|s| s.warped_moving_mask),
            pair.fixed,
            pair.fixed_mask,
        )?;
        let sim_inv = masked_similarity(
            &col(|s| s.warped_fixed),
            &col(|s| s.warped_fixed_mask),
            pair.moving,
            pair.moving_mask,
        )?;
        let smooth = smoothness(&col(|s| s.phi), mode)?;
        let smooth_inv = smoothness(&col(|s| s.phi_hat), mode)?;
        let (pre, empty_moving_tumor) = tumor_preservation(steps)?;
        let (ob, empty_fixed_tumor) = tumor_obliteration(steps)?;
        Ok(LossTerms {
            sim,
            sim_inv,
            smooth,
            smooth_inv,
            pre,
            ob,
            empty_moving_tumor,
            empty_fixed_tumor,
        })
    }

    /// `sim + sim_inv + ls (smooth + smooth_inv) + lp pre + lo ob`.
    pub fn total(&self, w: &LossWeights) -> Result<(Var<'t>, LossBreakdown)> {
        let total = self
            .sim
            .add(self.sim_inv)?
            .add(
                self.smooth
                    .add(self.smooth_inv)?
                    .scale(w.lambda_smooth as f32),
            )?
            .add(self.pre.scale(w.lambda_pre as f32))?
            .add(self.ob.scale(w.lambda_ob as f32))?;
        let b = LossBreakdown {
            sim: self.sim.item(),
            sim_inv: self.sim_inv.item(),
            smooth: self.smooth.item(),
            smooth_inv: self.smooth_inv.item(),
            pre: self.pre.item(),
            ob: self.ob.item(),
            total: total.item(),
            empty_moving_tumor: self.empty_moving_tumor,
            empty_fixed_tumor: self.empty_fixed_tumor,
        };
        Ok((total, b))
    }
}

/// Compute every term and their weighted sum.
pub fn total_loss<'t>(
    pair: &PairVars<'t>,
    steps: &[StepVars<'t>],
    w: &LossWeights,
    mode: SmoothnessMode,
) -> Result<(Var<'t>, LossBreakdown)> {
    LossTerms::compute(pair, steps, mode)?.total(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn leaf(tape: &Tape, s: [usize; 3], f: impl Fn(usize) -> f32) -> Var<'_> {
        let n = s.iter().product();
        tape.constant(Tensor::new([1, s[0], s[1], s[2]], (0..n).map(f).collect()).unwrap())
    }

    #[test]
    fn similarity_hand_value() {
        let tape = Tape::new();
        let s = [2, 2, 2];
        let fixed = leaf(&tape, s, |p| (p == 0) as u8 as f32);
        let moving = leaf(&tape, s, |_| 0.0);
        let zero = leaf(&tape, s, |_| 0.0);
        let l = masked_similarity(&[moving], &[zero], fixed, zero).unwrap();
        assert!((l.item() - 0.125).abs() < 1e-7);
    }

    #[test]
    fn similarity_ignores_union_of_tumors() {
        let tape = Tape::new();
        let s = [4, 4, 4];
        let fixed = leaf(&tape, s, |p| 0.3 + 0.01 * p as f32);
        // differs at voxels 3 (moving tumor) and 40 (fixed tumor)
        let moving = leaf(&tape, s, |p| {
            0.3 + 0.01 * p as f32 + if p == 3 || p == 40 { 0.5 } else { 0.0 }
        });
        let ym = leaf(&tape, s, |p| (p == 3) as u8 as f32);
        let yf = leaf(&tape, s, |p| (p == 40) as u8 as f32);
        assert_eq!(
            masked_similarity(&[moving], &[ym], fixed, yf)
                .unwrap()
                .item(),
            0.0
        );
        assert!(
            masked_similarity(&[moving], &[ym], fixed, ym)
                .unwrap()
                .item()
                > 0.0
        );
    }

    #[test]
    fn smoothness_of_linear_shear() {
        let tape = Tape::new();
        let n = 125;
        let data: Vec<f32> = (0..3 * n)
            .map(|q| if q < n { 0.1 * (q % 5) as f32 } else { 0.0 })
            .collect();
        let u = tape.constant(Tensor::new([3, 5, 5, 5], data).unwrap());
        let norm = smoothness(&[u], SmoothnessMode::Normalized).unwrap().item();
        let raw = smoothness(&[u], SmoothnessMode::Raw).unwrap().item();
        let grid = smoothness(&[u], SmoothnessMode::GridUnits).unwrap().item();
        assert!((norm - 0.01).abs() < 1e-7, "{norm}");
        assert!((grid - 0.01 * 0.25).abs() < 1e-8, "{grid}");
        assert!((raw - 1.25).abs() < 1e-5, "{raw}");
    }

    #[test]
    fn smoothness_of_translation_is_zero() {
        let tape = Tape::new();
        let u = tape.constant(Tensor::full([3, 4, 5, 6], 0.7));
        assert_eq!(
            smoothness(&[u, u], SmoothnessMode::Normalized)
                .unwrap()
                .item(),
            0.0
        );
    }

    fn scaling_field(s: [usize; 3], a: f32) -> Tensor {
        let n: usize = s.iter().product();
        let mut data = vec![0.0; 3 * n];
        for p in 0..n {
            let idx = [p / (s[1] * s[2]), (p / s[2]) % s[1], p % s[2]];
            for c in 0..3 {
                data[c * n + p] = a * idx[c] as f32;
            }
        }
        Tensor::new([3, s[0], s[1], s[2]], data).unwrap()
    }

    #[test]
    fn rigidity_of_uniform_scaling() {
        let tape = Tape::new();
        let s = [6, 6, 6];
        let u = tape.constant(scaling_field(s, 0.1));
        let mask = leaf(&tape, s, |p| (p % 3 == 0) as u8 as f32);
        let (l, empty) = rigidity(&[u], &[mask]).unwrap();
        assert!(!empty);
        let expect = (1.331f64 - 1.0).powi(2);
        assert!((l.item() - expect).abs() < 1e-5, "{}", l.item());
    }

    #[test]
    fn rigidity_with_empty_mask_is_zero_and_flagged() {
        let tape = Tape::new();
        let s = [4, 4, 4];
        let u = tape.constant(scaling_field(s, 0.2));
        let mask = leaf(&tape, s, |_| 0.0);
        let (l, empty) = rigidity(&[u], &[mask]).unwrap();
        assert_eq!(l.item(), 0.0);
        assert!(empty);
    }

    #[test]
    fn weighted_total_of_unit_terms() {
        let b = LossBreakdown {
            sim: 1.0,
            sim_inv: 1.0,
            smooth: 1.0,
            smooth_inv: 1.0,
            pre: 1.0,
            ob: 1.0,
            ..Default::default()
        };
        assert_eq!(b.weighted_total(&LossWeights::default()), 2052.0);
    }

    #[test]
    fn weights_reject_negative() {
        let w = LossWeights {
            lambda_pre: -1.0,
            ..Default::default()
        };
        assert!(w.validate().is_err());
        assert!(LossWeights::default().validate().is_ok());
    }
}
