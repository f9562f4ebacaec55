use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.eps > 0.0)
        {
            return Err(Error::InvalidConfig(format!(
                "invalid Adam settings {self:?}"
            )));
        }
        Ok(())
    }
}

/// Adaptive-moment optimizer with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    step: u32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &[&Tensor]) -> Self {
        Adam {
            cfg,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn steps_taken(&self) -> u32 {
        self.step
    }

    /// One update of every parameter with its gradient.
    pub fn update(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (x, &g)) in p.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
                let g = g as f64;
                let mj = b1 * m[j] as f64 + (1.0 - b1) * g;
                let vj = b2 * v[j] as f64 + (1.0 - b2) * g * g;
                m[j] = mj as f32;
                v[j] = vj as f32;
                let delta = lr * (mj / c1) / ((vj / c2).sqrt() + self.cfg.eps);
                // skipping exact zeros keeps a signed-zero parameter bit-identical
                if delta != 0.0 {
                    *x -= delta as f32;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_learning_rate_leaves_params_bit_identical() {
        let mut p = Tensor::new([4], vec![1.5, -0.0, 3.25e-7, -8.0]).unwrap();
        let before = p.clone();
        let mut opt = Adam::new(AdamConfig::default(), &[&p]);
        let g = Tensor::new([4], vec![0.3, -2.0, 1e-3, 0.0]).unwrap();
        opt.update(&mut [&mut p], &[g], 0.0);
        assert_eq!(
            p.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            before
                .data()
                .iter()
                .map(|x| x.to_bits())
                .collect::<Vec<_>>()
        );
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // with bias correction the first step is lr * sign(g)
        let mut p = Tensor::new([2], vec![0.0, 0.0]).unwrap();
        let mut opt = Adam::new(AdamConfig::default(), &[&p]);
        opt.update(
            &mut [&mut p],
            &[Tensor::new([2], vec![4.0, -0.5]).unwrap()],
            0.1,
        );
        assert!((p.data()[0] + 0.1).abs() < 1e-6);
        assert!((p.data()[1] - 0.1).abs() < 1e-6);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = Tensor::new([1], vec![5.0]).unwrap();
        let mut opt = Adam::new(AdamConfig::default(), &[&p]);
        for _ in 0..2000 {
            let g = Tensor::new([1], vec![2.0 * (p.data()[0] - 1.0)]).unwrap();
            opt.update(&mut [&mut p], &[g], 0.05);
        }
        assert!((p.data()[0] - 1.0).abs() < 1e-2);
    }
}
