//! Multi-step runs shared by the command-line tool: building a prepared
//! dataset, registering it, scoring at the original resolution and the
//! conditioning ablation.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::files::{read_json, write_json};
use super::{
    preprocess_pair, read_deformation, read_pair, synth_pair, write_deformation, write_pair,
    write_volume, RegistrationPair, ResampleTransform, RunConfig,
};
use crate::deformation::{warp_image, warp_mask, DeformationField};
use crate::engine::{register, Conditioning, EngineConfig, NetworkParams, Registration};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_registration, DoseStatistic, EvaluationInput, MetricsReport};

const TRANSFORM_FILE: &str = "transform.json";
const REGISTRATION_FILE: &str = "registration.json";
pub const REGISTRATION_FORMAT: &str = "tumorreg-registration";
pub const REGISTRATION_VERSION: u8 = 1;
const SOURCE_DIR: &str = "source";

/// A generated pair at its original resolution, its preprocessed working
/// copy and the transform between them.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedPair {
    pub name: String,
    pub source: RegistrationPair,
    pub work: RegistrationPair,
    pub transform: ResampleTransform,
}

impl PreparedPair {
    pub fn new(name: impl Into<String>, source: RegistrationPair, cfg: &RunConfig) -> Result<Self> {
        let (work, transform) = preprocess_pair(&source, &cfg.preprocess)?;
        Ok(PreparedPair {
            name: name.into(),
            source,
            work,
            transform,
        })
    }

    /// The working pair at `dir`, with the original pair under `dir/source`
    /// and the transform in `dir/transform.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_pair(dir, &self.work)?;
        write_pair(dir.join(SOURCE_DIR), &self.source)?;
        write_json(&dir.join(TRANSFORM_FILE), &self.transform)
    }

    pub fn read(name: &str, dir: &Path) -> Result<Self> {
        let work = read_pair(dir)?;
        let source = read_pair(dir.join(SOURCE_DIR))?;
        let transform: ResampleTransform = read_json(&dir.join(TRANSFORM_FILE))?;
        if transform.target_extents != work.extents()
            || transform.source_extents != source.extents()
        {
            return Err(Error::format(
                dir.join(TRANSFORM_FILE),
                "transform does not match the stored volumes",
            ));
        }
        Ok(PreparedPair {
            name: name.into(),
            source,
            work,
            transform,
        })
    }

    /// Score working-resolution maps against the original volumes.
    pub fn evaluate(
        &self,
        phi: &DeformationField,
        psi: &DeformationField,
        stat: DoseStatistic,
    ) -> Result<MetricsReport> {
        let phi = self.transform.inverse_field(phi)?;
        let psi = self.transform.inverse_field(psi)?;
        evaluate_registration(
            &self.name,
            &EvaluationInput {
                pair: &self.source,
                phi: &phi,
                psi: &psi,
                dose_statistic: stat,
            },
        )
    }
}

/// Name of the `i`-th generated pair.
pub fn pair_name(i: usize) -> String {
    format!("pair_{i:03}")
}

/// Generate and preprocess pair `i` of a run: the template with seed
/// `cfg.pair.seed + i`.
pub fn prepare_pair(cfg: &RunConfig, i: usize) -> Result<PreparedPair> {
    let mut spec = cfg.pair.clone();
    spec.seed = spec.seed.wrapping_add(i as u64);
    PreparedPair::new(pair_name(i), synth_pair(&spec)?, cfg)
}

/// Register the working pair, with the network if `params` is given.
pub fn register_prepared(
    p: &PreparedPair,
    params: Option<&NetworkParams>,
    cfg: &EngineConfig,
) -> Result<Registration> {
    register(&p.work, params, cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RegistrationManifest {
    format: String,
    version: u8,
    steps: usize,
    loss: crate::losses::LossBreakdown,
}

/// Write a registration of `pair` to `dir`: the composed maps, the moving
/// image and tumor mask warped by the forward map, and every step record
/// under `steps/step_NN/`.
pub fn write_registration(dir: &Path, pair: &RegistrationPair, reg: &Registration) -> Result<()> {
    let h = pair.spacing();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_deformation(dir.join("phi.json"), &reg.phi_final, h)?;
    write_deformation(dir.join("phi_hat.json"), &reg.phi_hat_final, h)?;
    write_volume(
        dir.join("warped_moving.json"),
        &warp_image(&pair.moving, &reg.phi_final)?,
        "normalized",
        None,
    )?;
    write_volume(
        dir.join("warped_moving_mask.json"),
        &warp_mask(&pair.moving_mask, &reg.phi_final, 0.5)?,
        "mask",
        Some("tumor"),
    )?;
    for (t, s) in reg.steps.iter().enumerate() {
        let sd = dir.join("steps").join(format!("step_{:02}", t + 1));
        std::fs::create_dir_all(&sd).map_err(|e| Error::io(&sd, e))?;
        write_deformation(sd.join("phi.json"), &s.phi, h)?;
        write_deformation(sd.join("phi_hat.json"), &s.phi_hat, h)?;
        write_volume(
            sd.join("warped_moving.json"),
            &s.warped_moving,
            "normalized",
            None,
        )?;
        write_volume(
            sd.join("warped_moving_mask.json"),
            &s.warped_moving_mask,
            "mask",
            Some("tumor"),
        )?;
        write_volume(
            sd.join("warped_fixed.json"),
            &s.warped_fixed,
            "normalized",
            None,
        )?;
        write_volume(
            sd.join("warped_fixed_mask.json"),
            &s.warped_fixed_mask,
            "mask",
            Some("tumor"),
        )?;
    }
    write_json(
        &dir.join(REGISTRATION_FILE),
        &RegistrationManifest {
            format: REGISTRATION_FORMAT.into(),
            version: REGISTRATION_VERSION,
            steps: reg.steps.len(),
            loss: reg.loss,
        },
    )
}

/// The composed forward and inverse maps of a stored registration.
pub fn read_registration_maps(dir: &Path) -> Result<(DeformationField, DeformationField)> {
    let mpath = dir.join(REGISTRATION_FILE);
    let m: RegistrationManifest = read_json(&mpath)?;
    if m.format != REGISTRATION_FORMAT || m.version != REGISTRATION_VERSION {
        return Err(Error::format(
            mpath,
            format!("unsupported registration {} v{}", m.format, m.version),
        ));
    }
    let (phi, _) = read_deformation(dir.join("phi.json"))?;
    let (psi, _) = read_deformation(dir.join("phi_hat.json"))?;
    if phi.extents() != psi.extents() {
        return Err(Error::ExtentMismatch {
            op: "read_registration_maps",
            left: phi.extents().to_vec(),
            right: psi.extents().to_vec(),
        });
    }
    Ok((phi, psi))
}

/// One row of the conditioning ablation: mean and standard deviation of the
/// tumor volume change and mean DSC of the healthy structures.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub condition: String,
    pub pairs: usize,
    pub delta_t_mean: f64,
    pub delta_t_sd: f64,
    pub tumor_mse_mean: f64,
    pub dsc_lung: f64,
    pub dsc_heart: f64,
    pub dsc_cord: f64,
}

/// Conditioning settings in table order.
pub const ABLATION_ORDER: [Conditioning; 4] = [
    Conditioning::NONE,
    Conditioning {
        forward: false,
        inverse: true,
    },
    Conditioning {
        forward: true,
        inverse: false,
    },
    Conditioning::BOTH,
];

fn mean_sd(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var.sqrt())
}

/// Summarize reports produced under one conditioning setting.
pub fn ablation_row(condition: Conditioning, reports: &[MetricsReport]) -> AblationRow {
    let pick = |f: &dyn Fn(&MetricsReport) -> Option<f64>| {
        reports.iter().filter_map(f).collect::<Vec<_>>()
    };
    let dt = pick(&|r| r.delta_t_percent);
    let mse = pick(&|r| r.tumor_mse);
    let lung = pick(&|r| {
        let (a, b) = (r.dsc.get("lung_left")?, r.dsc.get("lung_right")?);
        Some(0.5 * (a + b))
    });
    let heart = pick(&|r| r.dsc.get("heart").copied());
    let cord = pick(&|r| r.dsc.get("cord").copied());
    let (delta_t_mean, delta_t_sd) = mean_sd(&dt);
    AblationRow {
        condition: condition.label().into(),
        pairs: reports.len(),
        delta_t_mean,
        delta_t_sd,
        tumor_mse_mean: mean_sd(&mse).0,
        dsc_lung: mean_sd(&lung).0,
        dsc_heart: mean_sd(&heart).0,
        dsc_cord: mean_sd(&cord).0,
    }
}

/// Per-pair optimization of every pair under each conditioning setting.
/// Returns the summary rows and the per-pair reports, both in table order.
pub fn run_ablation(
    pairs: &[PreparedPair],
    cfg: &EngineConfig,
    stat: DoseStatistic,
) -> Result<Vec<(AblationRow, Vec<MetricsReport>)>> {
    ABLATION_ORDER
        .iter()
        .map(|&c| {
            let cfg = EngineConfig {
                conditioning: c,
                ..cfg.clone()
            };
            let reports = pairs
                .iter()
                .map(|p| {
                    let r = register_prepared(p, None, &cfg)?;
                    p.evaluate(&r.phi_final, &r.phi_hat_final, stat)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((ablation_row(c, &reports), reports))
        })
        .collect()
}

pub const ABLATION_CSV_VERSION: u32 = 1;

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = format!(
        "# tumorreg-ablation v{ABLATION_CSV_VERSION}\ncondition,pairs,delta_t_mean,delta_t_sd,tumor_mse_mean,dsc_lung,dsc_heart,dsc_cord\n"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.condition,
            r.pairs,
            r.delta_t_mean,
            r.delta_t_sd,
            r.tumor_mse_mean,
            r.dsc_lung,
            r.dsc_heart,
            r.dsc_cord
        );
    }
    out
}
