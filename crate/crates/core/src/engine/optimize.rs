//! Direct optimization of the per-step velocity fields of one pair, using the
//! same objective as network training.

use super::adam::Adam;
use super::recurrence::{pair_vars, Recurrence, Registration};
use super::{level_extents, EngineConfig};
use crate::dataio::RegistrationPair;
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossBreakdown};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct PairOptimization {
    pub registration: Registration,
    /// Objective before each update.
    pub history: Vec<LossBreakdown>,
}

fn unroll_fields<'t>(
    tape: &'t Tape,
    pair: &RegistrationPair,
    fields: &[Var<'t>],
    cfg: &EngineConfig,
) -> Result<(super::recurrence::Unrolled<'t>, crate::losses::PairVars<'t>)> {
    let pv = pair_vars(tape, pair, cfg);
    let mut rec = Recurrence::new(pv, cfg.int_steps);
    for &f in fields {
        let v = if cfg.half_res_flow {
            f.upsample2x(Some(pair.extents()))?
        } else {
            f
        };
        rec.advance(v)?;
    }
    Ok((rec.finish()?, pv))
}

/// Optimize `cfg.steps` velocity fields with Adam for
/// `cfg.pair_opt.iterations` updates, starting from zero. Fields live at half
/// resolution when `cfg.half_res_flow` is set.
pub fn optimize_pair(pair: &RegistrationPair, cfg: &EngineConfig) -> Result<PairOptimization> {
    cfg.validate()?;
    pair.validate()?;
    let ext = if cfg.half_res_flow {
        level_extents(pair.extents(), 1)[1]
    } else {
        pair.extents()
    };
    let mut params: Vec<Tensor> = (0..cfg.steps)
        .map(|_| Tensor::zeros([3, ext[0], ext[1], ext[2]]))
        .collect();
    let weights = cfg.effective_weights();
    let mut adam = Adam::new(cfg.adam, &params.iter().collect::<Vec<_>>());
    let mut history = Vec::with_capacity(cfg.pair_opt.iterations);
    for iteration in 0..cfg.pair_opt.iterations {
        let tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
        let (u, pv) = unroll_fields(&tape, pair, &vars, cfg)?;
        let (loss, breakdown) = total_loss(&pv, &u.steps, &weights, cfg.smoothness)?;
        if !breakdown.total.is_finite() {
            return Err(Error::OptimizationDivergence {
                iteration,
                loss: breakdown.total,
            });
        }
        history.push(breakdown);
        let grads = tape.backward(loss)?;
        let g: Vec<Tensor> = vars.iter().map(|&v| grads.get_or_zeros(v)).collect();
        if g.iter().any(|t| !t.all_finite()) {
            return Err(Error::OptimizationDivergence {
                iteration,
                loss: breakdown.total,
            });
        }
        adam.update(
            &mut params.iter_mut().collect::<Vec<_>>(),
            &g,
            cfg.pair_opt.learning_rate,
        );
    }
    let tape = Tape::new();
    let vars: Vec<Var> = params.into_iter().map(|p| tape.constant(p)).collect();
    let (u, pv) = unroll_fields(&tape, pair, &vars, cfg)?;
    let (_, loss) = total_loss(&pv, &u.steps, &weights, cfg.smoothness)?;
    Ok(PairOptimization {
        registration: Registration::from_unrolled(&u, pair.spacing(), loss)?,
        history,
    })
}
