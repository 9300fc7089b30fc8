//! Per-frame comparison of predicted trajectories against references.

use std::path::{Path, PathBuf};

use morphoflow_core::dataset::{load_manifest, SubjectManifest, MANIFEST_FILE};
use morphoflow_core::io::{read_field, read_volume};
use morphoflow_core::{
    detjac_stats, dice, jacobian_determinant, psnr, ssim3d, Boundary, DeformationField, ScalarVolume, SsimParams,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sub-directory holding samples inside a run directory.
pub const SAMPLES_DIR: &str = "samples";

/// One row of the evaluation CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub subject: String,
    pub frame: usize,
    pub psnr: f64,
    pub ssim: f64,
    /// Mean Dice over the foreground labels of the reference, when both
    /// sides carry label maps.
    pub dice: Option<f64>,
    /// Present when the prediction stores its deformation.
    pub neg_detjac_fraction: Option<f64>,
}

/// Subject directories under `dir`: the directory itself when it holds a
/// manifest, else its `samples/` sub-directory, else every child with a
/// manifest. Sorted by subject id.
pub fn subject_dirs(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    if !dir.is_dir() {
        return Err(Error::usage(format!("{} is not a directory", dir.display())));
    }
    if dir.join(MANIFEST_FILE).is_file() {
        return Ok(vec![(load_manifest(dir)?.subject_id, dir.to_path_buf())]);
    }
    if dir.join(SAMPLES_DIR).is_dir() {
        return subject_dirs(&dir.join(SAMPLES_DIR));
    }
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.join(MANIFEST_FILE).is_file() {
            out.push((load_manifest(&path)?.subject_id, path));
        }
    }
    if out.is_empty() {
        return Err(Error::usage(format!("no subject manifests under {}", dir.display())));
    }
    out.sort();
    Ok(out)
}

fn followups(dir: &Path, m: &SubjectManifest) -> Result<Vec<ScalarVolume>> {
    m.files[1..].iter().map(|f| Ok(read_volume(&dir.join(f), m.shape(), Boundary::Clamp)?)).collect()
}

/// Mean Dice over the non-zero labels of `reference`.
pub fn mean_dice(pred: &ScalarVolume, reference: &ScalarVolume) -> Result<f64> {
    let mut labels: Vec<i64> = reference.data().iter().map(|v| v.round() as i64).filter(|&l| l != 0).collect();
    labels.sort_unstable();
    labels.dedup();
    if labels.is_empty() {
        return Ok(dice(pred, reference, 0.0)?);
    }
    let sum = labels.iter().map(|&l| dice(pred, reference, l as f64)).sum::<morphoflow_core::Result<f64>>()?;
    Ok(sum / labels.len() as f64)
}

fn evaluate_subject(id: &str, pred_dir: &Path, ref_dir: &Path) -> Result<Vec<EvalRow>> {
    let pm = load_manifest(pred_dir)?;
    let rm = load_manifest(ref_dir)?;
    if pm.shape != rm.shape {
        return Err(Error::usage(format!("subject {id}: prediction shape {:?} differs from reference {:?}", pm.shape, rm.shape)));
    }
    if pm.files.len() != rm.files.len() {
        return Err(Error::usage(format!(
            "subject {id}: {} predicted follow-ups but {} reference follow-ups",
            pm.files.len() - 1,
            rm.files.len() - 1
        )));
    }
    let pred = followups(pred_dir, &pm)?;
    let reference = followups(ref_dir, &rm)?;
    let ref_labels = rm.ground_truth.as_ref().map(|g| g.segmentations.clone()).unwrap_or_default();
    let shape = pm.shape();
    let field_boundary = pm.field_boundary.unwrap_or(Boundary::Clamp);
    (0..pred.len())
        .map(|t| {
            let frame = t + 1;
            let labels_path = pred_dir.join(format!("labels_{frame}.raw"));
            let dice = match ref_labels.get(t) {
                Some(r) if labels_path.is_file() => {
                    let p = read_volume(&labels_path, shape, Boundary::Clamp)?;
                    Some(mean_dice(&p, &read_volume(&ref_dir.join(r), shape, Boundary::Clamp)?)?)
                }
                _ => None,
            };
            let phi_path = pred_dir.join(format!("deformation_{frame}.raw"));
            let neg_detjac_fraction = if phi_path.is_file() {
                let phi = DeformationField::from_displacement(read_field(&phi_path, shape, field_boundary)?);
                Some(detjac_stats(&jacobian_determinant(&phi)?)?.negative_fraction)
            } else {
                None
            };
            Ok(EvalRow {
                subject: id.to_string(),
                frame,
                psnr: psnr(&pred[t], &reference[t], None)?,
                ssim: ssim3d(&pred[t], &reference[t], SsimParams::default())?,
                dice,
                neg_detjac_fraction,
            })
        })
        .collect()
}

/// Evaluates every predicted subject against the reference subject with the
/// same id.
pub fn evaluate(pred: &Path, reference: &Path) -> Result<Vec<EvalRow>> {
    let preds = subject_dirs(pred)?;
    let refs = subject_dirs(reference)?;
    let pairs = preds
        .iter()
        .map(|(id, p)| {
            let r = refs
                .iter()
                .find(|(rid, _)| rid == id)
                .ok_or_else(|| Error::usage(format!("subject {id} has no reference under {}", reference.display())))?;
            Ok((id, p, &r.1))
        })
        .collect::<Result<Vec<_>>>()?;
    let rows = pairs
        .par_iter()
        .map(|(id, p, r)| evaluate_subject(id, p, r))
        .collect::<Result<Vec<_>>>()?;
    Ok(rows.into_iter().flatten().collect())
}

pub fn write_rows(path: &Path, rows: &[EvalRow]) -> Result<()> {
    let csv_err = |source| Error::Csv { path: path.to_path_buf(), source };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_rows(path: &Path) -> Result<Vec<EvalRow>> {
    if !path.is_file() {
        return Err(Error::usage(format!("{} does not exist", path.display())));
    }
    let csv_err = |source| Error::Csv { path: path.to_path_buf(), source };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}
