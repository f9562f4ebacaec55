use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume;

fn nonempty(m: &Volume, what: &str) -> Result<usize> {
    match m.count() {
        0 => Err(Error::EmptyMask(what.into())),
        n => Ok(n),
    }
}

/// Tumor volume change `|V_def - V_m| / V_m * 100` on voxel counts.
pub fn delta_t(y_m: &Volume, y_def: &Volume) -> Result<f64> {
    y_m.check_same_grid(y_def, "delta_t")?;
    let vm = nonempty(y_m, "delta_t: moving tumor mask")? as f64;
    let vd = y_def.count() as f64;
    Ok((vd - vm).abs() / vm * 100.0)
}

/// Local expansion and shrinkage: mean of `|J - 1|` over tumor voxels, times 100.
pub fn m_lexs(jac: &Volume, y_m: &Volume) -> Result<f64> {
    jac.check_same_grid(y_m, "m_lexs")?;
    let n = nonempty(y_m, "m_lexs: tumor mask")?;
    let sum: f64 = jac
        .data()
        .iter()
        .zip(y_m.data())
        .filter(|(_, &m)| m >= 0.5)
        .map(|(&j, _)| (j as f64 - 1.0).abs())
        .sum();
    Ok(sum / n as f64 * 100.0)
}

/// Mean squared difference of `I_m * y_m` and `I_def * y_def` over the union
/// of the two masks.
pub fn tumor_mse(i_m: &Volume, y_m: &Volume, i_def: &Volume, y_def: &Volume) -> Result<f64> {
    for v in [y_m, i_def, y_def] {
        i_m.check_same_grid(v, "tumor_mse")?;
    }
    nonempty(y_m, "tumor_mse: moving tumor mask")?;
    let (mut sum, mut n) = (0.0, 0usize);
    for p in 0..i_m.len() {
        let (a, b) = (y_m.data()[p] >= 0.5, y_def.data()[p] >= 0.5);
        if a || b {
            let x = if a { i_m.data()[p] as f64 } else { 0.0 };
            let y = if b { i_def.data()[p] as f64 } else { 0.0 };
            sum += (x - y).powi(2);
            n += 1;
        }
    }
    Ok(sum / n as f64)
}

/// Summary statistic of the dose inside a tumor.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DoseStatistic {
    #[default]
    Mean,
    Min,
    Max,
}

impl DoseStatistic {
    fn over(self, dose: &Volume, mask: &Volume, what: &str) -> Result<f64> {
        let vals = dose
            .data()
            .iter()
            .zip(mask.data())
            .filter(|(_, &m)| m >= 0.5)
            .map(|(&d, _)| d as f64);
        let (mut n, mut sum, mut lo, mut hi) = (0usize, 0.0, f64::INFINITY, f64::NEG_INFINITY);
        for d in vals {
            n += 1;
            sum += d;
            lo = lo.min(d);
            hi = hi.max(d);
        }
        if n == 0 {
            return Err(Error::EmptyMask(what.into()));
        }
        Ok(match self {
            DoseStatistic::Mean => sum / n as f64,
            DoseStatistic::Min => lo,
            DoseStatistic::Max => hi,
        })
    }
}

/// Planned tumor dose difference: `|stat(dose over y_m) - stat(dose over y_def)|`.
pub fn delta_ptd(dose: &Volume, y_m: &Volume, y_def: &Volume, stat: DoseStatistic) -> Result<f64> {
    dose.check_same_grid(y_m, "delta_ptd")?;
    dose.check_same_grid(y_def, "delta_ptd")?;
    let a = stat.over(dose, y_m, "delta_ptd: moving tumor mask")?;
    let b = stat.over(dose, y_def, "delta_ptd: deformed tumor mask")?;
    Ok((a - b).abs())
}

/// Mean `|J - 1|` over a region, without the percent scaling.
pub fn mean_abs_jacobian_deviation(jac: &Volume, region: &Volume) -> Result<f64> {
    Ok(m_lexs(jac, region)? / 100.0)
}
