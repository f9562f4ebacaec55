use std::collections::BTreeMap;

use crate::deformation::VelocityField;
use crate::error::{Error, Result};
use crate::volume::Volume;

/// Moving and fixed images with their tumor masks.
///
/// `moving_labels` / `fixed_labels` hold optional anatomy masks (lungs,
/// vessels) used only for evaluation. `gt_velocity`, when present, is the
/// velocity whose exponential warps the moving image onto the fixed one.
#[derive(Clone, Debug, PartialEq)]
pub struct RegistrationPair {
    pub moving: Volume,
    pub moving_mask: Volume,
    pub fixed: Volume,
    pub fixed_mask: Volume,
    pub dose: Option<Volume>,
    pub gt_velocity: Option<VelocityField>,
    pub moving_labels: BTreeMap<String, Volume>,
    pub fixed_labels: BTreeMap<String, Volume>,
}

impl RegistrationPair {
    pub fn new(
        moving: Volume,
        moving_mask: Volume,
        fixed: Volume,
        fixed_mask: Volume,
    ) -> Result<Self> {
        let pair = RegistrationPair {
            moving,
            moving_mask,
            fixed,
            fixed_mask,
            dose: None,
            gt_velocity: None,
            moving_labels: BTreeMap::new(),
            fixed_labels: BTreeMap::new(),
        };
        pair.validate()?;
        Ok(pair)
    }

    pub fn extents(&self) -> [usize; 3] {
        self.moving.extents()
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.moving.spacing()
    }

    /// Equal extents everywhere and binary tumor masks.
    pub fn validate(&self) -> Result<()> {
        let op = "RegistrationPair";
        self.moving.check_same_grid(&self.moving_mask, op)?;
        self.moving.check_same_grid(&self.fixed, op)?;
        self.moving.check_same_grid(&self.fixed_mask, op)?;
        if let Some(d) = &self.dose {
            self.moving.check_same_grid(d, op)?;
        }
        if let Some(v) = &self.gt_velocity {
            if v.extents() != self.extents() {
                return Err(Error::ExtentMismatch {
                    op,
                    left: self.extents().to_vec(),
                    right: v.extents().to_vec(),
                });
            }
        }
        for m in self
            .moving_labels
            .values()
            .chain(self.fixed_labels.values())
        {
            self.moving.check_same_grid(m, op)?;
        }
        for (name, m) in [("moving", &self.moving_mask), ("fixed", &self.fixed_mask)] {
            if !m.is_binary() {
                return Err(Error::InvalidConfig(format!(
                    "{name} tumor mask is not binary"
                )));
            }
        }
        Ok(())
    }
}
