//! On-disk dataset layout.
//!
//! ```text
//! <root>/index.json
//! <root>/<subject_id>/manifest.json
//! <root>/<subject_id>/vol_0.raw ... vol_T.raw
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{create_dir, read_json, read_volume, write_json, write_volume};
use crate::subject::{DiseaseLabel, SubjectRecord};
use crate::volume::{Boundary, Shape};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const INDEX_FILE: &str = "index.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthFiles {
    /// Generating velocity per follow-up.
    pub velocity: Vec<String>,
    /// Exact deformation (displacement) per follow-up.
    #[serde(default)]
    pub deformation: Vec<String>,
    /// Baseline label map.
    pub segmentation: String,
    /// Label map per follow-up.
    #[serde(default)]
    pub segmentations: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectManifest {
    pub subject_id: String,
    pub shape: [usize; 3],
    pub ages: Vec<f64>,
    pub label: DiseaseLabel,
    /// Baseline first, then one file per follow-up.
    pub files: Vec<String>,
    /// One flag per entry of `files`.
    pub synthetic_flags: Vec<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<GroundTruthFiles>,
    /// Boundary of any deformation files stored beside the volumes; clamped
    /// when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field_boundary: Option<Boundary>,
}

impl SubjectManifest {
    pub fn shape(&self) -> Shape {
        Shape(self.shape)
    }

    pub fn validate(&self) -> Result<()> {
        if self.files.is_empty() || self.files.len() != self.ages.len() || self.synthetic_flags.len() != self.files.len()
        {
            return Err(Error::invalid(format!(
                "manifest for {}: {} files, {} ages, {} flags",
                self.subject_id,
                self.files.len(),
                self.ages.len(),
                self.synthetic_flags.len()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub subject_id: String,
    pub dir: String,
    pub label: DiseaseLabel,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub subjects: Vec<IndexEntry>,
    pub split: Split,
    /// Free-form record of how the dataset was produced.
    #[serde(default)]
    pub generator: serde_json::Value,
}

impl DatasetIndex {
    pub fn load(root: &Path) -> Result<Self> {
        read_json(&root.join(INDEX_FILE))
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        write_json(&root.join(INDEX_FILE), self)
    }

    pub fn subject_dir(&self, root: &Path, id: &str) -> Option<PathBuf> {
        self.subjects.iter().find(|e| e.subject_id == id).map(|e| root.join(&e.dir))
    }
}

pub fn load_manifest(dir: &Path) -> Result<SubjectManifest> {
    let m: SubjectManifest = read_json(&dir.join(MANIFEST_FILE))?;
    m.validate()?;
    Ok(m)
}

/// Loads a subject (images use clamped boundaries).
pub fn load_subject(dir: &Path) -> Result<SubjectRecord> {
    let m = load_manifest(dir)?;
    let shape = m.shape();
    let mut vols = m
        .files
        .iter()
        .map(|f| read_volume(&dir.join(f), shape, Boundary::Clamp))
        .collect::<Result<Vec<_>>>()?;
    let baseline = vols.remove(0);
    let mut rec = SubjectRecord::new(m.subject_id.clone(), baseline, vols, m.ages.clone(), m.label)?;
    rec.synthetic = m.synthetic_flags[1..].to_vec();
    if let Some(gt) = &m.ground_truth {
        let seg = read_volume(&dir.join(&gt.segmentation), shape, Boundary::Clamp)?;
        rec = rec.with_segmentation(seg)?;
    }
    Ok(rec)
}

/// Writes the subject's scans and a manifest (without ground truth).
pub fn save_subject(dir: &Path, rec: &SubjectRecord) -> Result<SubjectManifest> {
    create_dir(dir)?;
    let mut files = Vec::with_capacity(rec.frames() + 1);
    for (t, v) in std::iter::once(&rec.baseline).chain(&rec.followups).enumerate() {
        let name = format!("vol_{t}.raw");
        write_volume(&dir.join(&name), v)?;
        files.push(name);
    }
    let mut flags = vec![false];
    flags.extend(&rec.synthetic);
    let ground_truth = match &rec.segmentation {
        Some(seg) => {
            write_volume(&dir.join("seg_0.raw"), seg)?;
            Some(GroundTruthFiles {
                velocity: vec![],
                deformation: vec![],
                segmentation: "seg_0.raw".into(),
                segmentations: vec![],
            })
        }
        None => None,
    };
    let m = SubjectManifest {
        subject_id: rec.subject_id.clone(),
        shape: rec.shape().0,
        ages: rec.ages.clone(),
        label: rec.label,
        files,
        synthetic_flags: flags,
        ground_truth,
        field_boundary: None,
    };
    write_json(&dir.join(MANIFEST_FILE), &m)?;
    Ok(m)
}

/// Loads every subject listed in the index, in index order.
pub fn load_dataset(root: &Path) -> Result<(DatasetIndex, Vec<SubjectRecord>)> {
    let index = DatasetIndex::load(root)?;
    let subjects = index
        .subjects
        .iter()
        .map(|e| load_subject(&root.join(&e.dir)))
        .collect::<Result<Vec<_>>>()?;
    Ok((index, subjects))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::ScalarVolume;

    #[test]
    fn subject_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = Shape::new(3, 4, 5);
        let base = ScalarVolume::from_fn(s, Boundary::Clamp, |c| c[0] as f64 * 0.25).unwrap();
        let f1 = base.map(|v| v + 0.5).unwrap();
        let mut rec = SubjectRecord::new("sub-001", base, vec![f1], vec![70.0, 71.5], DiseaseLabel::Mci).unwrap();
        rec.synthetic = vec![true];
        let m = save_subject(dir.path(), &rec).unwrap();
        assert_eq!(m.synthetic_flags, vec![false, true]);
        let back = load_subject(dir.path()).unwrap();
        assert_eq!(back, rec);
    }

    #[test]
    fn malformed_manifest_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = SubjectManifest {
            subject_id: "x".into(),
            shape: [2, 2, 2],
            ages: vec![1.0, 2.0],
            label: DiseaseLabel::Cn,
            files: vec!["vol_0.raw".into()],
            synthetic_flags: vec![false],
            ground_truth: None,
            field_boundary: None,
        };
        write_json(&dir.path().join(MANIFEST_FILE), &m).unwrap();
        assert!(load_manifest(dir.path()).is_err());
    }
}
