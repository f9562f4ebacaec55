//! Unsupervised training of the recurrent network.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::network::NetworkParams;
use super::recurrence::{pair_vars, unroll_network};
use super::EngineConfig;
use crate::dataio::RegistrationPair;
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossBreakdown};
use crate::tensor::{Tape, Tensor};

/// Stream offset so shuffling does not reuse the initialization stream.
const SHUFFLE_STREAM: u64 = 0x5348_5546;

/// Mean per-term loss over the pairs visited in one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub learning_rate: f64,
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: NetworkParams,
    pub history: Vec<EpochLoss>,
}

/// Constant for the first half of the epochs, then linear decay that would
/// reach zero at epoch `epochs`.
pub fn learning_rate_at(lr0: f64, epoch: usize, epochs: usize) -> f64 {
    let half = epochs / 2;
    if epoch < half {
        lr0
    } else {
        lr0 * (epochs - epoch) as f64 / (epochs - half) as f64
    }
}

fn check_dataset(dataset: &[RegistrationPair]) -> Result<()> {
    let first = dataset
        .first()
        .ok_or_else(|| Error::InvalidConfig("training set is empty".into()))?;
    for p in dataset {
        p.validate()?;
        if p.extents() != first.extents() {
            return Err(Error::ExtentMismatch {
                op: "train",
                left: first.extents().to_vec(),
                right: p.extents().to_vec(),
            });
        }
    }
    Ok(())
}

/// Objective and parameter gradients for one pair.
fn pair_gradients(
    params: &NetworkParams,
    pair: &RegistrationPair,
    cfg: &EngineConfig,
) -> Result<(LossBreakdown, Vec<Tensor>)> {
    let tape = Tape::new();
    let net = params.bind(&tape);
    let pv = pair_vars(&tape, pair, cfg);
    let u = unroll_network(&net, pv, cfg)?;
    let (loss, breakdown) = total_loss(&pv, &u.steps, &cfg.effective_weights(), cfg.smoothness)?;
    let grads = tape.backward(loss)?;
    Ok((
        breakdown,
        net.flat()
            .into_iter()
            .map(|&v| grads.get_or_zeros(v))
            .collect(),
    ))
}

/// Mean objective of `params` over a dataset, without updating anything.
pub fn evaluate_dataset(
    dataset: &[RegistrationPair],
    params: &NetworkParams,
    cfg: &EngineConfig,
) -> Result<LossBreakdown> {
    let losses = dataset
        .iter()
        .map(|p| super::forward_register(p, params, cfg).map(|r| r.loss))
        .collect::<Result<Vec<_>>>()?;
    Ok(LossBreakdown::mean(&losses))
}

/// Train from a fresh seeded initialization.
pub fn train(dataset: &[RegistrationPair], cfg: &EngineConfig) -> Result<TrainOutcome> {
    train_with(dataset, cfg, NetworkParams::init(cfg)?, |_| {})
}

/// Train from `params`, reporting every finished epoch.
pub fn train_with(
    dataset: &[RegistrationPair],
    cfg: &EngineConfig,
    mut params: NetworkParams,
    mut on_epoch: impl FnMut(&EpochLoss),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_dataset(dataset)?;
    let mut adam = Adam::new(cfg.adam, &params.flat());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = learning_rate_at(cfg.learning_rate, epoch, cfg.epochs);
        order.shuffle(&mut rng);
        let mut seen = Vec::with_capacity(dataset.len());
        for batch in order.chunks(cfg.batch_size) {
            let mut sum: Option<Vec<Tensor>> = None;
            for &i in batch {
                let (b, g) = pair_gradients(&params, &dataset[i], cfg)?;
                if !b.total.is_finite() || g.iter().any(|t| !t.all_finite()) {
                    return Err(Error::Divergence {
                        epoch,
                        loss: b.total,
                    });
                }
                seen.push(b);
                match &mut sum {
                    None => sum = Some(g),
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, x)| a.add_assign(x)),
                }
            }
            let scale = 1.0 / batch.len() as f32;
            let grads: Vec<Tensor> = sum
                .unwrap()
                .into_iter()
                .map(|t| t.map(|x| x * scale))
                .collect();
            adam.update(&mut params.flat_mut(), &grads, lr);
        }
        let row = EpochLoss {
            epoch,
            learning_rate: lr,
            loss: LossBreakdown::mean(&seen),
        };
        on_epoch(&row);
        history.push(row);
    }
    Ok(TrainOutcome { params, history })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_is_flat_then_linear() {
        assert_eq!(learning_rate_at(2e-4, 0, 100), 2e-4);
        assert_eq!(learning_rate_at(2e-4, 49, 100), 2e-4);
        assert_eq!(learning_rate_at(2e-4, 50, 100), 2e-4);
        assert!((learning_rate_at(2e-4, 75, 100) - 1e-4).abs() < 1e-12);
        assert!((learning_rate_at(2e-4, 99, 100) - 4e-6).abs() < 1e-12);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        assert!(train(&[], &EngineConfig::default()).is_err());
    }
}
