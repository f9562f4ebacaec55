//! The recurrent warping loop shared by the network and the per-pair
//! optimizer.
//!
//! At step `t` the velocity `v` is integrated to `phi = exp(v)` and
//! `phi_hat = exp(-v)`. The moving image and mask are resampled sequentially
//! by `phi`. The accumulated forward map is `Phi_t = Phi_{t-1} o phi` (warp by
//! `Phi_{t-1}` first). Its inverse `Psi_t = phi_hat o Psi_{t-1}` carries the
//! original fixed image and mask into the moving frame each step.

use super::network::{ClstmState, Network};
use super::EngineConfig;
use crate::dataio::RegistrationPair;
use crate::deformation::{compose_var, exp_svf_var, DeformationField, VelocityField};
use crate::error::Result;
use crate::losses::{total_loss, LossBreakdown, PairVars, StepVars};
use crate::tensor::{concat_channels, Tape, Var};
use crate::volume::Volume;

/// Plain per-step output. Masks are binarized at 0.5.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub phi: DeformationField,
    pub phi_hat: DeformationField,
    pub warped_moving: Volume,
    pub warped_moving_mask: Volume,
    pub warped_fixed: Volume,
    pub warped_fixed_mask: Volume,
}

/// Result of registering one pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Registration {
    /// Full-resolution velocity of every step.
    pub velocities: Vec<VelocityField>,
    pub steps: Vec<StepRecord>,
    /// Composition of all per-step maps; warps the moving image onto the
    /// fixed grid.
    pub phi_final: DeformationField,
    /// Inverse chain; warps the fixed image into the moving frame.
    pub phi_hat_final: DeformationField,
    /// Objective at the returned deformation.
    pub loss: LossBreakdown,
}

/// Tape leaves for a pair with disabled conditioning sides zeroed.
pub(crate) fn pair_vars<'t>(
    tape: &'t Tape,
    pair: &RegistrationPair,
    cfg: &EngineConfig,
) -> PairVars<'t> {
    let leaf = |v: &Volume, keep: bool| {
        let mut t = v.to_tensor();
        if !keep {
            t.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        tape.constant(t)
    };
    PairVars {
        moving: leaf(&pair.moving, true),
        moving_mask: leaf(&pair.moving_mask, cfg.conditioning.forward),
        fixed: leaf(&pair.fixed, true),
        fixed_mask: leaf(&pair.fixed_mask, cfg.conditioning.inverse),
    }
}

pub(crate) struct Unrolled<'t> {
    pub velocities: Vec<Var<'t>>,
    pub steps: Vec<StepVars<'t>>,
    pub phi_final: Var<'t>,
    pub psi_final: Var<'t>,
}

pub(crate) struct Recurrence<'t> {
    pair: PairVars<'t>,
    int_steps: usize,
    image: Var<'t>,
    mask: Var<'t>,
    phi_total: Option<Var<'t>>,
    psi_total: Option<Var<'t>>,
    velocities: Vec<Var<'t>>,
    steps: Vec<StepVars<'t>>,
}

impl<'t> Recurrence<'t> {
    pub fn new(pair: PairVars<'t>, int_steps: usize) -> Self {
        Recurrence {
            pair,
            int_steps,
            image: pair.moving,
            mask: pair.moving_mask,
            phi_total: None,
            psi_total: None,
            velocities: Vec::new(),
            steps: Vec::new(),
        }
    }

    /// Network input `{I_m^{t-1}, y_m^{t-1}, I_f, y_f}`.
    pub fn input(&self) -> Result<Var<'t>> {
        concat_channels(
            self.image.tape(),
            &[self.image, self.mask, self.pair.fixed, self.pair.fixed_mask],
        )
    }

    pub fn advance(&mut self, v: Var<'t>) -> Result<()> {
        let phi = exp_svf_var(v, self.int_steps)?;
        let phi_hat = exp_svf_var(v.neg(), self.int_steps)?;
        let prev_mask = self.mask;
        self.image = self.image.grid_sample(phi)?;
        self.mask = self.mask.grid_sample(phi)?;
        let phi_total = match self.phi_total {
            None => phi,
            Some(total) => compose_var(total, phi)?,
        };
        let psi_total = match self.psi_total {
            None => phi_hat,
            Some(total) => compose_var(phi_hat, total)?,
        };
        self.phi_total = Some(phi_total);
        self.psi_total = Some(psi_total);
        self.velocities.push(v);
        self.steps.push(StepVars {
            phi,
            phi_hat,
            warped_moving: self.image,
            warped_moving_mask: self.mask,
            prev_moving_mask: prev_mask,
            warped_fixed: self.pair.fixed.grid_sample(psi_total)?,
            warped_fixed_mask: self.pair.fixed_mask.grid_sample(psi_total)?,
            ob_mask: self.pair.fixed_mask,
        });
        Ok(())
    }

    /// Fill in the obliteration masks and return the recorded steps.
    ///
    /// The inverse map of step `t` lands on the grid that the later inverse
    /// steps `t+1..T` carry onto the fixed image, so the fixed tumor is pulled
    /// back through those later steps (the last step uses `y_f` itself).
    pub fn finish(mut self) -> Result<Unrolled<'t>> {
        let mut tail: Option<Var<'t>> = None;
        for t in (0..self.steps.len()).rev() {
            if let Some(g) = tail {
                self.steps[t].ob_mask = self.pair.fixed_mask.grid_sample(g)?;
            }
            let phi_hat = self.steps[t].phi_hat;
            tail = Some(match tail {
                None => phi_hat,
                Some(g) => compose_var(g, phi_hat)?,
            });
        }
        Ok(Unrolled {
            velocities: self.velocities,
            steps: self.steps,
            phi_final: self.phi_total.expect("at least one step"),
            psi_final: self.psi_total.expect("at least one step"),
        })
    }
}

/// Run the network for `cfg.steps` recurrent steps.
pub(crate) fn unroll_network<'t>(
    net: &Network<Var<'t>>,
    pair: PairVars<'t>,
    cfg: &EngineConfig,
) -> Result<Unrolled<'t>> {
    let mut rec = Recurrence::new(pair, cfg.int_steps);
    let mut states = vec![ClstmState::default(); cfg.levels];
    for t in 1..=cfg.steps {
        let v = net.step(cfg, rec.input()?, &mut states, t)?;
        rec.advance(v)?;
    }
    rec.finish()
}

fn volume(v: Var<'_>, spacing: [f64; 3]) -> Volume {
    Volume::from_tensor(&v.value(), spacing).expect("single-channel volume")
}

fn field(v: Var<'_>) -> DeformationField {
    DeformationField::new((*v.value()).clone()).expect("finite displacement")
}

impl Registration {
    pub(crate) fn from_unrolled(
        u: &Unrolled<'_>,
        spacing: [f64; 3],
        loss: LossBreakdown,
    ) -> Result<Self> {
        let steps = u
            .steps
            .iter()
            .map(|s| StepRecord {
                phi: field(s.phi),
                phi_hat: field(s.phi_hat),
                warped_moving: volume(s.warped_moving, spacing),
                warped_moving_mask: volume(s.warped_moving_mask, spacing).binarize(0.5),
                warped_fixed: volume(s.warped_fixed, spacing),
                warped_fixed_mask: volume(s.warped_fixed_mask, spacing).binarize(0.5),
            })
            .collect();
        let velocities = u
            .velocities
            .iter()
            .map(|v| VelocityField::new((*v.value()).clone()))
            .collect::<Result<_>>()?;
        Ok(Registration {
            velocities,
            steps,
            phi_final: field(u.phi_final),
            phi_hat_final: field(u.psi_final),
            loss,
        })
    }

    /// Moving image warped once by the composed map.
    pub fn warped_moving(&self, moving: &Volume) -> Result<Volume> {
        crate::deformation::warp_image(moving, &self.phi_final)
    }
}

/// Register a pair with fixed network parameters.
pub fn forward_register(
    pair: &RegistrationPair,
    params: &super::NetworkParams,
    cfg: &EngineConfig,
) -> Result<Registration> {
    cfg.validate()?;
    pair.validate()?;
    let tape = Tape::new();
    let net = params.bind_frozen(&tape);
    let pv = pair_vars(&tape, pair, cfg);
    let u = unroll_network(&net, pv, cfg)?;
    let (_, loss) = total_loss(&pv, &u.steps, &cfg.effective_weights(), cfg.smoothness)?;
    Registration::from_unrolled(&u, pair.spacing(), loss)
}

/// Register with the network when parameters are given, otherwise with the
/// per-pair optimizer.
pub fn register(
    pair: &RegistrationPair,
    params: Option<&super::NetworkParams>,
    cfg: &EngineConfig,
) -> Result<Registration> {
    match params {
        Some(p) => forward_register(pair, p, cfg),
        None => super::optimize_pair(pair, cfg).map(|o| o.registration),
    }
}
