//! Stage 1: per-subject velocity extraction into an on-disk cache.

use std::fmt::Write as _;
use std::path::Path;

use morphoflow_core::io::{create_dir, read_field, read_json, write_field, write_json};
use morphoflow_core::registration::register_sequence_detailed;
use morphoflow_core::{
    resample, spatial_gradient, Boundary, DiseaseLabel, RegistrationConfig, ScalarVolume, Shape, SubjectRecord,
    VectorField, VelocitySequence,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CACHE_FILE: &str = "cache.json";
pub const SUMMARY_FILE: &str = "registration_summary.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheEntry {
    pub subject_id: String,
    pub dir: String,
    pub label: DiseaseLabel,
    /// Baseline age first, then one per cached velocity.
    pub ages: Vec<f64>,
    pub velocities: Vec<String>,
    /// Spatial gradient of the baseline at the field resolution.
    pub gradient: String,
    pub ssd_reduction: Vec<f64>,
    pub final_energy: Vec<f64>,
    pub iterations: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Failure {
    pub subject_id: String,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VelocityCache {
    pub image_shape: Shape,
    pub field_shape: Shape,
    pub registration: RegistrationConfig,
    pub subjects: Vec<CacheEntry>,
    pub failures: Vec<Failure>,
}

impl VelocityCache {
    pub fn load(dir: &Path) -> Result<Self> {
        Ok(read_json(&dir.join(CACHE_FILE))?)
    }

    pub fn mean_ssd_reduction(&self) -> f64 {
        let all: Vec<f64> = self.subjects.iter().flat_map(|e| e.ssd_reduction.iter().copied()).collect();
        all.iter().sum::<f64>() / all.len().max(1) as f64
    }
}

/// A cached subject loaded back into memory.
#[derive(Clone, Debug, PartialEq)]
pub struct CachedSequence {
    pub subject_id: String,
    pub label: DiseaseLabel,
    pub baseline_age: f64,
    pub velocities: VelocitySequence,
    pub gradient: VectorField,
}

/// Conditioning gradient: the baseline resampled to the field grid, then
/// differentiated there.
pub fn baseline_gradient(baseline: &ScalarVolume, field_shape: Shape) -> Result<VectorField> {
    let low = if baseline.shape() == field_shape { baseline.clone() } else { resample(baseline, field_shape)? };
    Ok(spatial_gradient(&low)?)
}

fn field_shape_of(reg: &RegistrationConfig, image: Shape) -> Shape {
    reg.field_shape.unwrap_or(image)
}

fn cache_subject(rec: &SubjectRecord, reg: &RegistrationConfig, out: &Path) -> Result<CacheEntry> {
    let (seq, results) = register_sequence_detailed(rec, reg)?;
    let dir = out.join(&rec.subject_id);
    create_dir(&dir)?;
    let mut velocities = Vec::with_capacity(seq.len());
    for (t, v) in seq.frames().iter().enumerate() {
        let name = format!("velocity_{}.raw", t + 1);
        write_field(&dir.join(&name), v)?;
        velocities.push(format!("{}/{name}", rec.subject_id));
    }
    let grad = baseline_gradient(&rec.baseline, field_shape_of(reg, rec.shape()))?;
    write_field(&dir.join("gradient.raw"), &grad)?;
    Ok(CacheEntry {
        subject_id: rec.subject_id.clone(),
        dir: rec.subject_id.clone(),
        label: rec.label,
        ages: rec.ages.clone(),
        velocities,
        gradient: format!("{}/gradient.raw", rec.subject_id),
        ssd_reduction: results.iter().map(|r| r.ssd_reduction()).collect(),
        final_energy: results.iter().map(|r| r.final_energy()).collect(),
        iterations: results.iter().map(|r| r.energy_trace.len() - 1).collect(),
    })
}

/// Registers every subject's baseline to each follow-up and caches the
/// velocities. Per-subject failures are recorded and skipped.
pub fn train_stage1(records: &[SubjectRecord], reg: &RegistrationConfig, out: &Path) -> Result<VelocityCache> {
    reg.validate()?;
    let first = records.first().ok_or_else(|| Error::usage("no subjects to register"))?;
    let image_shape = first.shape();
    if let Some(r) = records.iter().find(|r| r.shape() != image_shape) {
        return Err(Error::usage(format!("subject {} has shape {}, expected {image_shape}", r.subject_id, r.shape())));
    }
    create_dir(out)?;
    let outcomes: Vec<std::result::Result<CacheEntry, Failure>> = records
        .par_iter()
        .map(|rec| {
            cache_subject(rec, reg, out)
                .map_err(|e| Failure { subject_id: rec.subject_id.clone(), error: e.to_string() })
        })
        .collect();
    let mut subjects = Vec::new();
    let mut failures = Vec::new();
    for o in outcomes {
        match o {
            Ok(e) => subjects.push(e),
            Err(f) => failures.push(f),
        }
    }
    let cache = VelocityCache {
        image_shape,
        field_shape: field_shape_of(reg, image_shape),
        registration: reg.clone(),
        subjects,
        failures,
    };
    write_json(&out.join(CACHE_FILE), &cache)?;
    let path = out.join(SUMMARY_FILE);
    std::fs::write(&path, summary_csv(&cache)).map_err(|e| Error::io(&path, e))?;
    Ok(cache)
}

pub fn summary_csv(cache: &VelocityCache) -> String {
    let mut s = String::from("subject_id,frame,ssd_reduction,final_energy,iterations\n");
    for e in &cache.subjects {
        for t in 0..e.ssd_reduction.len() {
            let _ = writeln!(s, "{},{},{:.6},{:.6e},{}", e.subject_id, t + 1, e.ssd_reduction[t], e.final_energy[t], e.iterations[t]);
        }
    }
    s
}

/// Loads every cached subject.
pub fn load_cache(dir: &Path) -> Result<(VelocityCache, Vec<CachedSequence>)> {
    let cache = VelocityCache::load(dir)?;
    let shape = cache.field_shape;
    let boundary = cache.registration.velocity_boundary.unwrap_or(Boundary::Clamp);
    let seqs = cache
        .subjects
        .iter()
        .map(|e| {
            let frames = e
                .velocities
                .iter()
                .map(|f| read_field(&dir.join(f), shape, boundary))
                .collect::<morphoflow_core::Result<Vec<_>>>()?;
            let ages = e.ages.get(1..).unwrap_or_default().to_vec();
            Ok(CachedSequence {
                subject_id: e.subject_id.clone(),
                label: e.label,
                baseline_age: e.ages[0],
                velocities: VelocitySequence::new(frames, ages)?,
                gradient: read_field(&dir.join(&e.gradient), shape, Boundary::Clamp)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((cache, seqs))
}
