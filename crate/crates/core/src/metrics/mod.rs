//! Registration quality metrics: overlap, surface and centerline distances,
//! tumor preservation, dose difference and the poor-registration filter.

mod centerline;
mod overlap;
mod tumor;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::RegistrationPair;
use crate::deformation::{jacobian_det, warp_image, warp_mask, DeformationField};
use crate::error::{Error, Result};

pub use centerline::{centerline, directed_median_distance, mcd};
pub use overlap::{distance_transform, dsc, hd95, surface_voxels};
pub use tumor::{
    delta_ptd, delta_t, m_lexs, mean_abs_jacobian_deviation, tumor_mse, DoseStatistic,
};

/// Structures scored by overlap and surface distance.
pub const OVERLAP_STRUCTURES: [&str; 4] = ["lung_left", "lung_right", "heart", "cord"];
/// Structures scored by centerline distance.
pub const TUBULAR_STRUCTURES: [&str; 4] = ["trachea", "aorta", "pa", "ivc"];
/// Lung DSC below this marks a registration as poor.
pub const VBA_DSC_THRESHOLD: f64 = 0.8;
pub const METRICS_CSV_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub pair: String,
    pub dsc: BTreeMap<String, f64>,
    pub hd95: BTreeMap<String, f64>,
    pub mcd: BTreeMap<String, f64>,
    pub delta_t_percent: Option<f64>,
    pub m_lexs_percent: Option<f64>,
    pub tumor_mse: Option<f64>,
    pub delta_ptd: Option<f64>,
    pub excluded: bool,
    pub exclusion_reason: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Exclusion {
    pub excluded: bool,
    /// Failing structures, `"left lung"`, `"right lung"` or both joined by `", "`.
    pub reason: Option<String>,
}

/// Exclude a registration when any lung DSC is strictly below `threshold`.
pub fn vba_filter(report: &MetricsReport, threshold: f64) -> Result<Exclusion> {
    let mut failing = Vec::new();
    for (key, name) in [("lung_left", "left lung"), ("lung_right", "right lung")] {
        let v = report
            .dsc
            .get(key)
            .ok_or_else(|| Error::UndefinedMetric(format!("vba_filter needs dsc for {key}")))?;
        if *v < threshold {
            failing.push(name);
        }
    }
    Ok(Exclusion {
        excluded: !failing.is_empty(),
        reason: (!failing.is_empty()).then(|| failing.join(", ")),
    })
}

/// Everything needed to score one registration.
pub struct EvaluationInput<'a> {
    pub pair: &'a RegistrationPair,
    /// Forward map on the fixed grid: warps moving-frame data onto the fixed image.
    pub phi: &'a DeformationField,
    /// Inverse map on the moving grid.
    pub psi: &'a DeformationField,
    pub dose_statistic: DoseStatistic,
}

fn undefined_to_none(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedMetric(_) | Error::EmptyMask(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Score a registration. Structures missing from either label set, and
/// metrics that are undefined for the given masks, are left out.
///
/// The moving tumor is carried onto the fixed grid by `phi` for volume,
/// intensity and dose comparisons. Local expansion is measured with the
/// Jacobian of `psi`, which lives on the moving grid where the tumor mask is
/// defined.
pub fn evaluate_registration(name: &str, input: &EvaluationInput<'_>) -> Result<MetricsReport> {
    let EvaluationInput { pair, phi, psi, .. } = *input;
    let mut report = MetricsReport {
        pair: name.into(),
        ..Default::default()
    };
    for s in OVERLAP_STRUCTURES.iter().chain(&TUBULAR_STRUCTURES) {
        let (Some(m), Some(f)) = (pair.moving_labels.get(*s), pair.fixed_labels.get(*s)) else {
            continue;
        };
        let warped = warp_mask(m, phi, 0.5)?;
        if let Some(v) = undefined_to_none(dsc(&warped, f))? {
            report.dsc.insert((*s).into(), v);
        }
        if OVERLAP_STRUCTURES.contains(s) {
            if let Some(v) = undefined_to_none(hd95(&warped, f))? {
                report.hd95.insert((*s).into(), v);
            }
        } else if let Some(v) = undefined_to_none(mcd(&warped, f))? {
            report.mcd.insert((*s).into(), v);
        }
    }
    if pair.moving_mask.count() > 0 {
        let y_def = warp_mask(&pair.moving_mask, phi, 0.5)?;
        report.delta_t_percent = Some(delta_t(&pair.moving_mask, &y_def)?);
        let jac = jacobian_det(psi, pair.spacing());
        report.m_lexs_percent = Some(m_lexs(&jac, &pair.moving_mask)?);
        let i_def = warp_image(&pair.moving, phi)?;
        report.tumor_mse = Some(tumor_mse(&pair.moving, &pair.moving_mask, &i_def, &y_def)?);
        if let Some(dose) = &pair.dose {
            report.delta_ptd = undefined_to_none(
                delta_ptd(dose, &pair.moving_mask, &y_def, input.dose_statistic).map_err(
                    |e| match e {
                        Error::EmptyMask(m) => Error::UndefinedMetric(m),
                        e => e,
                    },
                ),
            )?;
        }
    }
    if report.dsc.contains_key("lung_left") && report.dsc.contains_key("lung_right") {
        let ex = vba_filter(&report, VBA_DSC_THRESHOLD)?;
        report.excluded = ex.excluded;
        report.exclusion_reason = ex.reason;
    }
    Ok(report)
}

fn columns() -> Vec<String> {
    let mut c: Vec<String> = [
        "pair",
        "excluded",
        "exclusion_reason",
        "delta_t_percent",
        "m_lexs_percent",
        "tumor_mse",
        "delta_ptd",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    c.extend(
        OVERLAP_STRUCTURES
            .iter()
            .chain(&TUBULAR_STRUCTURES)
            .map(|s| format!("dsc_{s}")),
    );
    c.extend(OVERLAP_STRUCTURES.iter().map(|s| format!("hd95_{s}")));
    c.extend(TUBULAR_STRUCTURES.iter().map(|s| format!("mcd_{s}")));
    c
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Metrics as comma-separated text: a `# tumorreg-metrics v1` line, a header
/// row and one row per report. Undefined values are empty cells.
pub fn metrics_csv(reports: &[MetricsReport]) -> String {
    let mut out = format!(
        "# tumorreg-metrics v{METRICS_CSV_VERSION}\n{}\n",
        columns().join(",")
    );
    for r in reports {
        let mut row = vec![
            r.pair.replace(',', ";"),
            (r.excluded as u8).to_string(),
            r.exclusion_reason
                .clone()
                .unwrap_or_default()
                .replace(',', ";"),
            cell(r.delta_t_percent),
            cell(r.m_lexs_percent),
            cell(r.tumor_mse),
            cell(r.delta_ptd),
        ];
        row.extend(
            OVERLAP_STRUCTURES
                .iter()
                .chain(&TUBULAR_STRUCTURES)
                .map(|s| cell(r.dsc.get(*s).copied())),
        );
        row.extend(
            OVERLAP_STRUCTURES
                .iter()
                .map(|s| cell(r.hd95.get(*s).copied())),
        );
        row.extend(
            TUBULAR_STRUCTURES
                .iter()
                .map(|s| cell(r.mcd.get(*s).copied())),
        );
        let _ = writeln!(out, "{}", row.join(","));
    }
    out
}

pub fn write_metrics_csv(path: impl AsRef<Path>, reports: &[MetricsReport]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, metrics_csv(reports)).map_err(|e| Error::io(path, e))
}
