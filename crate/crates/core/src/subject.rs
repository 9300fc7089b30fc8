use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{ScalarVolume, Shape};

/// Diagnostic class of a subject.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum DiseaseLabel {
    Cn = 0,
    Mci = 1,
    Ad = 2,
}

impl DiseaseLabel {
    pub const ALL: [DiseaseLabel; 3] = [DiseaseLabel::Cn, DiseaseLabel::Mci, DiseaseLabel::Ad];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            DiseaseLabel::Cn => "CN",
            DiseaseLabel::Mci => "MCI",
            DiseaseLabel::Ad => "AD",
        }
    }
}

impl From<DiseaseLabel> for u8 {
    fn from(l: DiseaseLabel) -> u8 {
        l as u8
    }
}

impl TryFrom<u8> for DiseaseLabel {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            0 => Ok(DiseaseLabel::Cn),
            1 => Ok(DiseaseLabel::Mci),
            2 => Ok(DiseaseLabel::Ad),
            other => Err(Error::invalid(format!("unknown disease label {other}"))),
        }
    }
}

impl std::str::FromStr for DiseaseLabel {
    type Err = Error;

    /// Accepts `CN`/`MCI`/`AD` (any case) or `0`/`1`/`2`.
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "CN" | "0" => Ok(DiseaseLabel::Cn),
            "MCI" | "1" => Ok(DiseaseLabel::Mci),
            "AD" | "2" => Ok(DiseaseLabel::Ad),
            _ => Err(Error::invalid(format!("unknown disease label {s:?} (expected CN, MCI or AD)"))),
        }
    }
}

impl std::fmt::Display for DiseaseLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One subject's longitudinal scans.
///
/// `ages[0]` is the baseline age and `ages[t]` belongs to `followups[t - 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub baseline: ScalarVolume,
    pub followups: Vec<ScalarVolume>,
    pub ages: Vec<f64>,
    pub label: DiseaseLabel,
    /// Label map aligned with the baseline.
    pub segmentation: Option<ScalarVolume>,
    /// One flag per follow-up; true when the frame was synthesized.
    pub synthetic: Vec<bool>,
}

impl SubjectRecord {
    pub fn new(
        subject_id: impl Into<String>,
        baseline: ScalarVolume,
        followups: Vec<ScalarVolume>,
        ages: Vec<f64>,
        label: DiseaseLabel,
    ) -> Result<Self> {
        let synthetic = vec![false; followups.len()];
        let rec = SubjectRecord {
            subject_id: subject_id.into(),
            baseline,
            followups,
            ages,
            label,
            segmentation: None,
            synthetic,
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn with_segmentation(mut self, seg: ScalarVolume) -> Result<Self> {
        if seg.shape() != self.baseline.shape() {
            return Err(Error::ShapeMismatch { expected: self.baseline.shape().0, actual: seg.shape().0 });
        }
        self.segmentation = Some(seg);
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ages.len() != self.followups.len() + 1 {
            return Err(Error::invalid(format!(
                "subject {}: {} ages for {} scans",
                self.subject_id,
                self.ages.len(),
                self.followups.len() + 1
            )));
        }
        if self.synthetic.len() != self.followups.len() {
            return Err(Error::invalid(format!("subject {}: provenance flags do not match frames", self.subject_id)));
        }
        if self.ages.iter().any(|a| !a.is_finite()) || self.ages.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid(format!(
                "subject {}: ages must be strictly increasing, got {:?}",
                self.subject_id, self.ages
            )));
        }
        let shape = self.baseline.shape();
        if let Some(f) = self.followups.iter().find(|f| f.shape() != shape) {
            return Err(Error::ShapeMismatch { expected: shape.0, actual: f.shape().0 });
        }
        Ok(())
    }

    pub fn shape(&self) -> Shape {
        self.baseline.shape()
    }

    pub fn baseline_age(&self) -> f64 {
        self.ages[0]
    }

    pub fn followup_ages(&self) -> &[f64] {
        &self.ages[1..]
    }

    pub fn frames(&self) -> usize {
        self.followups.len()
    }
}
