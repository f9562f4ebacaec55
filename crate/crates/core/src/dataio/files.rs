//! On-disk layouts.
//!
//! A volume is a JSON header `name.json` next to a payload `name.raw`. The
//! payload starts with `"TRVL"`, a version byte and three zero bytes, then
//! holds `channels * D * H * W` little-endian `f32` values, channel-major.
//! Pairs and datasets are directories with a JSON manifest naming their
//! volumes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::RegistrationPair;
use crate::deformation::{DeformationField, VelocityField};
use crate::engine::EpochLoss;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::volume::Volume;

pub const VOLUME_MAGIC: &[u8; 4] = b"TRVL";
pub const VOLUME_VERSION: u8 = 1;
pub const VOLUME_FORMAT: &str = "tumorreg-volume";
pub const PAIR_FORMAT: &str = "tumorreg-pair";
pub const PAIR_VERSION: u8 = 1;
pub const DATASET_FORMAT: &str = "tumorreg-dataset";
pub const DATASET_VERSION: u8 = 1;
pub const LOSS_CSV_VERSION: u32 = 1;

/// Contents of a volume's JSON header.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeHeader {
    pub format: String,
    pub version: u8,
    pub extents: [usize; 3],
    /// Millimetres per voxel.
    pub spacing: [f64; 3],
    /// 1 for images and masks, 3 for vector fields.
    pub channels: usize,
    /// Free-form unit of the values, e.g. `"normalized"`, `"mask"`, `"voxel"`.
    pub units: String,
    /// Structure a mask delineates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub structure: Option<String>,
    /// Payload file name, relative to the header.
    pub data_file: String,
}

pub(crate) fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn check_format(path: &Path, found: (&str, u8), expected: (&str, u8)) -> Result<()> {
    if found.0 != expected.0 {
        return Err(Error::format(
            path,
            format!("expected format {:?}, found {:?}", expected.0, found.0),
        ));
    }
    if found.1 != expected.1 {
        return Err(Error::format(
            path,
            format!("unsupported {} version {}", found.0, found.1),
        ));
    }
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn data_path(header: &Path) -> PathBuf {
    header.with_extension("raw")
}

fn write_payload(path: &Path, header: VolumeHeader, data: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(8 + 4 * data.len());
    bytes.extend_from_slice(VOLUME_MAGIC);
    bytes.extend_from_slice(&[VOLUME_VERSION, 0, 0, 0]);
    for x in data {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    let raw = data_path(path);
    std::fs::write(&raw, bytes).map_err(|e| Error::io(&raw, e))?;
    write_json(path, &header)
}

fn read_payload(path: &Path, channels: usize) -> Result<(VolumeHeader, Vec<f32>)> {
    let header: VolumeHeader = read_json(path)?;
    check_format(
        path,
        (&header.format, header.version),
        (VOLUME_FORMAT, VOLUME_VERSION),
    )?;
    if header.channels != channels {
        return Err(Error::format(
            path,
            format!(
                "expected {channels} channel(s), header says {}",
                header.channels
            ),
        ));
    }
    if header.extents.contains(&0) || header.spacing.iter().any(|h| !(h.is_finite() && *h > 0.0)) {
        return Err(Error::format(path, "extents and spacing must be positive"));
    }
    let raw = path
        .parent()
        .unwrap_or(Path::new("."))
        .join(&header.data_file);
    let bytes = std::fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
    if bytes.len() < 8 || &bytes[..4] != VOLUME_MAGIC {
        return Err(Error::format(&raw, "not a volume payload (bad magic)"));
    }
    if bytes[4] != VOLUME_VERSION {
        return Err(Error::format(
            &raw,
            format!("unsupported payload version {}", bytes[4]),
        ));
    }
    let n = channels * header.extents.iter().product::<usize>();
    if bytes.len() - 8 != 4 * n {
        return Err(Error::format(
            &raw,
            format!(
                "payload holds {} bytes, header implies {}",
                bytes.len() - 8,
                4 * n
            ),
        ));
    }
    let data = bytes[8..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((header, data))
}

fn header(
    extents: [usize; 3],
    spacing: [f64; 3],
    channels: usize,
    units: &str,
    path: &Path,
) -> VolumeHeader {
    VolumeHeader {
        format: VOLUME_FORMAT.into(),
        version: VOLUME_VERSION,
        extents,
        spacing,
        channels,
        units: units.into(),
        structure: None,
        data_file: data_path(path)
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
    }
}

/// Write `v` as `path` (header) plus the payload beside it.
pub fn write_volume(
    path: impl AsRef<Path>,
    v: &Volume,
    units: &str,
    structure: Option<&str>,
) -> Result<()> {
    let path = path.as_ref();
    let mut h = header(v.extents(), v.spacing(), 1, units, path);
    h.structure = structure.map(str::to_owned);
    write_payload(path, h, v.data())
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let (h, data) = read_payload(path, 1)?;
    Volume::new(h.extents, h.spacing, data)
}

fn write_vector(path: &Path, t: &Tensor, spacing: [f64; 3]) -> Result<()> {
    let e = t.spatial()?;
    write_payload(path, header(e, spacing, 3, "voxel", path), t.data())
}

fn read_vector(path: &Path) -> Result<(Tensor, [f64; 3])> {
    let (h, data) = read_payload(path, 3)?;
    let [d, hh, w] = h.extents;
    Ok((Tensor::new([3, d, hh, w], data)?, h.spacing))
}

/// Displacement field in voxel units; `spacing` is recorded for reference.
pub fn write_deformation(
    path: impl AsRef<Path>,
    phi: &DeformationField,
    spacing: [f64; 3],
) -> Result<()> {
    write_vector(path.as_ref(), phi.tensor(), spacing)
}

pub fn read_deformation(path: impl AsRef<Path>) -> Result<(DeformationField, [f64; 3])> {
    let (t, h) = read_vector(path.as_ref())?;
    Ok((DeformationField::new(t)?, h))
}

pub fn write_velocity(path: impl AsRef<Path>, v: &VelocityField, spacing: [f64; 3]) -> Result<()> {
    write_vector(path.as_ref(), v.tensor(), spacing)
}

pub fn read_velocity(path: impl AsRef<Path>) -> Result<(VelocityField, [f64; 3])> {
    let (t, h) = read_vector(path.as_ref())?;
    Ok((VelocityField::new(t)?, h))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PairManifest {
    format: String,
    version: u8,
    extents: [usize; 3],
    spacing: [f64; 3],
    dose: bool,
    gt_velocity: bool,
    moving_labels: Vec<String>,
    fixed_labels: Vec<String>,
}

const PAIR_MANIFEST: &str = "pair.json";
const DATASET_MANIFEST: &str = "dataset.json";

fn label_path(dir: &Path, side: &str, name: &str) -> PathBuf {
    dir.join("labels").join(side).join(format!("{name}.json"))
}

fn check_label_name(name: &str, path: &Path) -> Result<()> {
    let ok = !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
    if ok {
        Ok(())
    } else {
        Err(Error::format(
            path,
            format!("invalid structure name {name:?}"),
        ))
    }
}

/// Write a pair as a directory of volumes plus `pair.json`.
pub fn write_pair(dir: impl AsRef<Path>, pair: &RegistrationPair) -> Result<()> {
    let dir = dir.as_ref();
    pair.validate()?;
    create_dir(dir)?;
    write_volume(dir.join("moving.json"), &pair.moving, "normalized", None)?;
    write_volume(
        dir.join("moving_mask.json"),
        &pair.moving_mask,
        "mask",
        Some("tumor"),
    )?;
    write_volume(dir.join("fixed.json"), &pair.fixed, "normalized", None)?;
    write_volume(
        dir.join("fixed_mask.json"),
        &pair.fixed_mask,
        "mask",
        Some("tumor"),
    )?;
    if let Some(d) = &pair.dose {
        write_volume(dir.join("dose.json"), d, "gy", None)?;
    }
    if let Some(v) = &pair.gt_velocity {
        write_velocity(dir.join("gt_velocity.json"), v, pair.spacing())?;
    }
    for (side, labels) in [
        ("moving", &pair.moving_labels),
        ("fixed", &pair.fixed_labels),
    ] {
        if labels.is_empty() {
            continue;
        }
        create_dir(&dir.join("labels").join(side))?;
        for (name, m) in labels {
            let path = label_path(dir, side, name);
            check_label_name(name, &path)?;
            write_volume(&path, m, "mask", Some(name))?;
        }
    }
    write_json(
        &dir.join(PAIR_MANIFEST),
        &PairManifest {
            format: PAIR_FORMAT.into(),
            version: PAIR_VERSION,
            extents: pair.extents(),
            spacing: pair.spacing(),
            dose: pair.dose.is_some(),
            gt_velocity: pair.gt_velocity.is_some(),
            moving_labels: pair.moving_labels.keys().cloned().collect(),
            fixed_labels: pair.fixed_labels.keys().cloned().collect(),
        },
    )
}

pub fn read_pair(dir: impl AsRef<Path>) -> Result<RegistrationPair> {
    let dir = dir.as_ref();
    let mpath = dir.join(PAIR_MANIFEST);
    let m: PairManifest = read_json(&mpath)?;
    check_format(&mpath, (&m.format, m.version), (PAIR_FORMAT, PAIR_VERSION))?;
    let mut pair = RegistrationPair::new(
        read_volume(dir.join("moving.json"))?,
        read_volume(dir.join("moving_mask.json"))?,
        read_volume(dir.join("fixed.json"))?,
        read_volume(dir.join("fixed_mask.json"))?,
    )?;
    if pair.extents() != m.extents {
        return Err(Error::ExtentMismatch {
            op: "read_pair",
            left: m.extents.to_vec(),
            right: pair.extents().to_vec(),
        });
    }
    if m.dose {
        pair.dose = Some(read_volume(dir.join("dose.json"))?);
    }
    if m.gt_velocity {
        pair.gt_velocity = Some(read_velocity(dir.join("gt_velocity.json"))?.0);
    }
    let read_labels = |side: &str, names: &[String]| -> Result<BTreeMap<String, Volume>> {
        names
            .iter()
            .map(|n| {
                let path = label_path(dir, side, n);
                check_label_name(n, &path)?;
                Ok((n.clone(), read_volume(path)?))
            })
            .collect()
    };
    pair.moving_labels = read_labels("moving", &m.moving_labels)?;
    pair.fixed_labels = read_labels("fixed", &m.fixed_labels)?;
    pair.validate()?;
    Ok(pair)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetManifest {
    format: String,
    version: u8,
    pairs: Vec<String>,
}

/// Write named pairs into subdirectories of `dir` with a `dataset.json` index.
pub fn write_dataset(dir: impl AsRef<Path>, pairs: &[(String, RegistrationPair)]) -> Result<()> {
    let dir = dir.as_ref();
    create_dir(dir)?;
    for (name, pair) in pairs {
        check_label_name(name, dir)?;
        write_pair(dir.join(name), pair)?;
    }
    write_dataset_index(
        dir,
        &pairs.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>(),
    )
}

/// Write only the `dataset.json` index for pairs already stored under `dir`.
pub fn write_dataset_index(dir: impl AsRef<Path>, names: &[String]) -> Result<()> {
    let dir = dir.as_ref();
    for n in names {
        check_label_name(n, dir)?;
    }
    write_json(
        &dir.join(DATASET_MANIFEST),
        &DatasetManifest {
            format: DATASET_FORMAT.into(),
            version: DATASET_VERSION,
            pairs: names.to_vec(),
        },
    )
}

/// Pair names listed in a dataset index, in order.
pub fn dataset_pairs(dir: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = dir.as_ref().join(DATASET_MANIFEST);
    let m: DatasetManifest = read_json(&path)?;
    check_format(
        &path,
        (&m.format, m.version),
        (DATASET_FORMAT, DATASET_VERSION),
    )?;
    for n in &m.pairs {
        check_label_name(n, &path)?;
    }
    Ok(m.pairs)
}

pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Vec<(String, RegistrationPair)>> {
    let dir = dir.as_ref();
    dataset_pairs(dir)?
        .into_iter()
        .map(|n| {
            let p = read_pair(dir.join(&n))?;
            Ok((n, p))
        })
        .collect()
}

/// Per-epoch loss terms as comma-separated text under a `# tumorreg-loss v1`
/// line.
pub fn loss_history_csv(history: &[EpochLoss]) -> String {
    let mut out = format!("# tumorreg-loss v{LOSS_CSV_VERSION}\nepoch,lr,sim,sim_inv,smooth,smooth_inv,pre,ob,total\n");
    for r in history {
        let l = &r.loss;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.epoch,
            r.learning_rate,
            l.sim,
            l.sim_inv,
            l.smooth,
            l.smooth_inv,
            l.pre,
            l.ob,
            l.total
        );
    }
    out
}

pub fn write_loss_history(path: impl AsRef<Path>, history: &[EpochLoss]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, loss_history_csv(history)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{synth_pair, PairSpec, PhantomSpec};

    fn small_pair() -> RegistrationPair {
        let spec = PairSpec {
            phantom: PhantomSpec::default().with_extents([16, 16, 12]),
            tumor_radius_mm: 40.0,
            ..PairSpec::default()
        };
        synth_pair(&spec).unwrap()
    }

    #[test]
    fn volume_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let v = Volume::from_fn([3, 4, 5], [0.5, 1.0, 2.5], |i, j, k| {
            (i * 20 + j * 5 + k) as f32 * 0.1 - 1.3
        });
        let p = dir.path().join("v.json");
        write_volume(&p, &v, "normalized", Some("body")).unwrap();
        let back = read_volume(&p).unwrap();
        assert_eq!(back, v);
        let raw = std::fs::read(dir.path().join("v.raw")).unwrap();
        assert_eq!(&raw[..8], b"TRVL\x01\0\0\0");
        assert_eq!(raw.len(), 8 + 4 * 60);
    }

    #[test]
    fn field_round_trip_and_channel_check() {
        let dir = tempfile::tempdir().unwrap();
        let phi = DeformationField::from_fn([4, 3, 2], |x| [x[0] * 0.25, -x[1], 1e-7 * x[2]]);
        let p = dir.path().join("phi.json");
        write_deformation(&p, &phi, [2.0; 3]).unwrap();
        let (back, h) = read_deformation(&p).unwrap();
        assert_eq!(back, phi);
        assert_eq!(h, [2.0; 3]);
        assert!(matches!(read_volume(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn malformed_payloads_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.json");
        write_volume(&p, &Volume::zeros([2, 2, 2], [1.0; 3]), "mask", None).unwrap();
        let raw = dir.path().join("v.raw");
        let mut bytes = std::fs::read(&raw).unwrap();
        bytes.pop();
        std::fs::write(&raw, &bytes).unwrap();
        assert!(matches!(read_volume(&p), Err(Error::Format { .. })));
        bytes[0] = b'X';
        std::fs::write(&raw, &bytes).unwrap();
        assert!(matches!(read_volume(&p), Err(Error::Format { .. })));
        std::fs::write(&p, "{\"format\": \"tumorreg-volume\"}").unwrap();
        assert!(matches!(read_volume(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn pair_and_dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let pair = small_pair();
        assert!(
            pair.dose.is_some() && pair.gt_velocity.is_some() && !pair.moving_labels.is_empty()
        );
        write_dataset(dir.path(), &[("p0".into(), pair.clone())]).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].0, "p0");
        assert_eq!(back[0].1, pair);
    }

    #[test]
    fn loss_csv_layout() {
        let row = EpochLoss {
            epoch: 3,
            learning_rate: 1e-4,
            loss: Default::default(),
        };
        let text = loss_history_csv(&[row]);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "# tumorreg-loss v1");
        assert_eq!(lines[1].split(',').count(), 9);
        assert!(lines[2].starts_with("3,0.0001,0,"));
    }
}
