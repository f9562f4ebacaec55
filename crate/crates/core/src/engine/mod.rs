//! Recurrent registration model, its training loop and the per-pair optimizer.

mod adam;
mod checkpoint;
mod network;
mod optimize;
mod recurrence;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{LossWeights, SmoothnessMode};

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{
    checkpoint_bytes, parse_checkpoint, read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use network::{clstm_step, ClstmParams, ClstmState, ConvParams, Network, NetworkParams};
pub use optimize::{optimize_pair, PairOptimization};
pub use recurrence::{forward_register, register, Registration, StepRecord};
pub use train::{evaluate_dataset, learning_rate_at, train, train_with, EpochLoss, TrainOutcome};

/// Which tumor masks condition the model.
///
/// Forward conditioning feeds the moving tumor mask and enables the
/// preservation penalty; inverse conditioning does the same for the fixed
/// tumor mask and the obliteration penalty. A disabled side has its mask
/// replaced by zeros everywhere.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Conditioning {
    pub forward: bool,
    pub inverse: bool,
}

impl Default for Conditioning {
    fn default() -> Self {
        Conditioning {
            forward: true,
            inverse: true,
        }
    }
}

impl Conditioning {
    pub const NONE: Conditioning = Conditioning {
        forward: false,
        inverse: false,
    };
    pub const BOTH: Conditioning = Conditioning {
        forward: true,
        inverse: true,
    };

    /// Label used in ablation tables: which sides are conditioned.
    pub fn label(&self) -> &'static str {
        match (self.forward, self.inverse) {
            (false, false) => "none",
            (false, true) => "inverse",
            (true, false) => "forward",
            (true, true) => "both",
        }
    }

    /// Loss weights with the penalties of disabled sides set to zero.
    pub fn apply(&self, w: &LossWeights) -> LossWeights {
        LossWeights {
            lambda_smooth: w.lambda_smooth,
            lambda_pre: if self.forward { w.lambda_pre } else { 0.0 },
            lambda_ob: if self.inverse { w.lambda_ob } else { 0.0 },
        }
    }
}

/// Settings of the direct per-pair optimizer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairOptConfig {
    pub iterations: usize,
    pub learning_rate: f64,
}

impl Default for PairOptConfig {
    fn default() -> Self {
        PairOptConfig {
            iterations: 150,
            learning_rate: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    /// Recurrent steps.
    pub steps: usize,
    /// Squaring steps per velocity integration.
    pub int_steps: usize,
    /// Encoder depth.
    pub levels: usize,
    /// Feature channels per encoder level.
    pub channels: Vec<usize>,
    pub leaky_slope: f32,
    /// Predict velocities at half resolution and upsample them.
    pub half_res_flow: bool,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub weights: LossWeights,
    pub smoothness: SmoothnessMode,
    pub conditioning: Conditioning,
    pub pair_opt: PairOptConfig,
    pub seed: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            steps: 8,
            int_steps: crate::deformation::DEFAULT_INT_STEPS,
            levels: 4,
            channels: vec![8, 16, 16, 32],
            leaky_slope: crate::tensor::LEAKY_RELU_SLOPE,
            half_res_flow: true,
            learning_rate: 2e-4,
            epochs: 100,
            batch_size: 2,
            adam: AdamConfig::default(),
            weights: LossWeights::default(),
            smoothness: SmoothnessMode::GridUnits,
            conditioning: Conditioning::default(),
            pair_opt: PairOptConfig::default(),
            seed: 0,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.steps == 0 {
            return bad("steps must be >= 1".into());
        }
        if self.int_steps == 0 {
            return bad("int_steps must be >= 1".into());
        }
        if self.levels < 2 {
            return bad(format!("levels must be >= 2, got {}", self.levels));
        }
        if self.channels.len() != self.levels || self.channels.contains(&0) {
            return bad(format!(
                "need {} positive channel widths, got {:?}",
                self.levels, self.channels
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("invalid learning rate {}", self.learning_rate));
        }
        if !(self.pair_opt.learning_rate >= 0.0 && self.pair_opt.learning_rate.is_finite()) {
            return bad(format!(
                "invalid pair learning rate {}",
                self.pair_opt.learning_rate
            ));
        }
        if !self.leaky_slope.is_finite() {
            return bad("invalid leaky slope".into());
        }
        self.adam.validate()?;
        self.weights.validate()
    }

    /// Loss weights after conditioning is applied.
    pub fn effective_weights(&self) -> LossWeights {
        self.conditioning.apply(&self.weights)
    }
}

/// Spatial extents of every encoder level, full resolution first, then the
/// bottleneck after the last strided convolution.
pub fn level_extents(extents: [usize; 3], levels: usize) -> Vec<[usize; 3]> {
    let mut out = vec![extents];
    for _ in 0..levels {
        let e = *out.last().unwrap();
        out.push(e.map(|n| n.div_ceil(2)));
    }
    out
}
