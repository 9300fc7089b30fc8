//! Trajectory synthesis from a baseline, label propagation and sequence
//! completion.

use std::collections::BTreeMap;
use std::path::Path;

use morphoflow_core::dataset::{SubjectManifest, MANIFEST_FILE};
use morphoflow_core::io::{create_dir, write_field, write_json, write_volume};
use morphoflow_core::{
    detjac_stats, integrate_svf, jacobian_determinant, resample, warp, DeformationField, DetJacStats, DiseaseLabel,
    ScalarVolume, SubjectRecord, VectorField, VelocitySequence, WarpMode,
};
use morphoflow_model::checkpoint::{self, Checkpoint};
use morphoflow_model::ddpm::sample;
use morphoflow_model::ldt::unpatchify;
use morphoflow_model::{Ldt, NoiseSchedule, SequenceCondition};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::stage1::baseline_gradient;
use crate::stage2::{condition_for, CheckpointExtra, Normalization};

/// What to synthesize for one subject.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthesisRequest {
    pub baseline: ScalarVolume,
    /// When known, every target age must exceed it.
    pub baseline_age: Option<f64>,
    /// Follow-up ages, strictly increasing.
    pub ages: Vec<f64>,
    pub label: DiseaseLabel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Synthesis {
    pub frames: Vec<ScalarVolume>,
    pub deformations: Vec<DeformationField>,
    /// Sampled velocities at image resolution.
    pub velocities: VelocitySequence,
    pub detjac: Vec<DetJacStats>,
}

/// A trained model ready to sample trajectories.
pub struct Synthesizer {
    model: Ldt,
    schedule: NoiseSchedule,
    run: RunConfig,
    norm: Normalization,
}

impl Synthesizer {
    pub fn new(model: Ldt, schedule: NoiseSchedule, run: RunConfig, norm: Normalization) -> Self {
        Synthesizer { model, schedule, run, norm }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let extra: CheckpointExtra = serde_json::from_value(ckpt.extra)
            .map_err(|e| Error::usage(format!("checkpoint metadata is not a training run: {e}")))?;
        if extra.run.ldt_config()? != *ckpt.model.config() {
            return Err(Error::usage("checkpoint network does not match its stored run configuration"));
        }
        Ok(Synthesizer::new(ckpt.model, ckpt.schedule, extra.run, extra.normalization))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Synthesizer::from_checkpoint(checkpoint::load(path)?)
    }

    pub fn config(&self) -> &RunConfig {
        &self.run
    }

    /// Sampler settings; `corrector_steps` may be overridden per call.
    pub fn with_corrector_steps(mut self, steps: usize) -> Self {
        self.run.corrector_steps = steps;
        self
    }

    fn check(&self, req: &SynthesisRequest) -> Result<()> {
        if req.baseline.shape() != self.run.image_shape {
            return Err(Error::usage(format!(
                "baseline shape {} does not match the model's image shape {}",
                req.baseline.shape(),
                self.run.image_shape
            )));
        }
        if req.ages.is_empty() || req.ages.len() > self.run.frames {
            return Err(Error::usage(format!("expected 1 to {} follow-up ages, got {}", self.run.frames, req.ages.len())));
        }
        if req.ages.iter().any(|a| !a.is_finite()) || req.ages.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::usage(format!("ages must be strictly increasing, got {:?}", req.ages)));
        }
        if let Some(a0) = req.baseline_age {
            if req.ages[0] <= a0 {
                return Err(Error::usage(format!("follow-up age {} is not after the baseline age {a0}", req.ages[0])));
            }
        }
        Ok(())
    }

    /// Conditioning built from the baseline gradient, label and ages.
    pub fn condition(&self, req: &SynthesisRequest) -> Result<SequenceCondition> {
        self.check(req)?;
        let grad = baseline_gradient(&req.baseline, self.run.field_shape)?;
        condition_for(&req.ages, req.label, &grad, &self.run, &self.norm)
    }

    /// Samples velocity sequences at the field resolution. Requests with
    /// equal frame counts share one batch; each batch draws from its own
    /// seeded stream.
    pub fn sample_velocities(&self, requests: &[SynthesisRequest], seed: u64) -> Result<Vec<VelocitySequence>> {
        let conds = requests.iter().map(|r| self.condition(r)).collect::<Result<Vec<_>>>()?;
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, r) in requests.iter().enumerate() {
            groups.entry(r.ages.len()).or_default().push(i);
        }
        let cfg = self.model.config();
        let per_frame = cfg.num_patches() * cfg.token_dim();
        let mut out: Vec<Option<VelocitySequence>> = vec![None; requests.len()];
        for (&frames, members) in &groups {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (frames as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let batch_conds: Vec<SequenceCondition> = members.iter().map(|&i| conds[i].clone()).collect();
            let dim = frames * per_frame;
            let z = sample(&self.model, &batch_conds, members.len(), dim, &self.schedule, self.run.sampler(), &mut rng)?;
            for (k, &i) in members.iter().enumerate() {
                let fields = (0..frames)
                    .map(|t| {
                        let start = k * dim + t * per_frame;
                        let values = unpatchify(&z[start..start + per_frame], 3, self.run.field_shape, self.run.patch_size)?;
                        let v = VectorField::new(self.run.field_shape, values, self.run.boundary)?;
                        Ok(v.scaled(self.norm.velocity_scale))
                    })
                    .collect::<Result<Vec<_>>>()?;
                out[i] = Some(VelocitySequence::new(fields, requests[i].ages.clone())?);
            }
        }
        Ok(out.into_iter().map(|v| v.expect("every request belongs to a group")).collect())
    }

    /// Full trajectories: sampled velocities are upsampled to the image grid,
    /// integrated and applied to the baseline.
    pub fn synthesize(&self, requests: &[SynthesisRequest], seed: u64) -> Result<Vec<Synthesis>> {
        let sampled = self.sample_velocities(requests, seed)?;
        requests
            .par_iter()
            .zip(sampled)
            .map(|(req, seq)| render(&req.baseline, &seq, self.run.squaring_steps))
            .collect()
    }
}

/// Applies a velocity sequence to a baseline.
pub fn render(baseline: &ScalarVolume, seq: &VelocitySequence, squaring_steps: u32) -> Result<Synthesis> {
    let shape = baseline.shape();
    let mut frames = Vec::with_capacity(seq.len());
    let mut deformations = Vec::with_capacity(seq.len());
    let mut velocities = Vec::with_capacity(seq.len());
    let mut detjac = Vec::with_capacity(seq.len());
    for v in seq.frames() {
        let v = if v.shape() == shape { v.clone() } else { resample(v, shape)? };
        let phi = integrate_svf(&v, squaring_steps)?;
        frames.push(warp(baseline, &phi, WarpMode::Linear)?);
        detjac.push(detjac_stats(&jacobian_determinant(&phi)?)?);
        deformations.push(phi);
        velocities.push(v);
    }
    Ok(Synthesis { frames, deformations, velocities: VelocitySequence::new(velocities, seq.ages().to_vec())?, detjac })
}

/// Nearest-neighbour warp of a label map by each deformation.
pub fn propagate_labels(segmentation: &ScalarVolume, deformations: &[DeformationField]) -> Result<Vec<ScalarVolume>> {
    deformations
        .iter()
        .map(|phi| {
            if phi.shape() != segmentation.shape() {
                return Err(Error::usage(format!(
                    "deformation shape {} does not match segmentation shape {}",
                    phi.shape(),
                    segmentation.shape()
                )));
            }
            Ok(warp(segmentation, phi, WarpMode::Nearest)?)
        })
        .collect()
}

/// Per-class distribution of years from baseline to each follow-up index.
#[derive(Clone, Debug, PartialEq)]
pub struct AgeModel {
    /// `(class, frame) -> (mean, std, min, max)` of the age offset.
    stats: BTreeMap<(DiseaseLabel, usize), (f64, f64, f64, f64)>,
}

impl AgeModel {
    pub fn from_records(records: &[SubjectRecord]) -> Self {
        let mut offsets: BTreeMap<(DiseaseLabel, usize), Vec<f64>> = BTreeMap::new();
        for r in records {
            for (t, a) in r.followup_ages().iter().enumerate() {
                offsets.entry((r.label, t)).or_default().push(a - r.baseline_age());
            }
        }
        let stats = offsets
            .into_iter()
            .map(|(k, v)| {
                let n = v.len() as f64;
                let mean = v.iter().sum::<f64>() / n;
                let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
                let min = v.iter().copied().fold(f64::INFINITY, f64::min);
                let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                (k, (mean, std, min, max))
            })
            .collect();
        AgeModel { stats }
    }

    /// Draws the age offset of follow-up `frame`, clipped to the observed
    /// range; `None` when the class never reached that frame.
    pub fn draw(&self, label: DiseaseLabel, frame: usize, rng: &mut impl Rng) -> Option<f64> {
        let &(mean, std, min, max) = self.stats.get(&(label, frame))?;
        let x = if std > 0.0 { Normal::new(mean, std).ok()?.sample(rng) } else { mean };
        Some(x.clamp(min, max))
    }
}

/// Fills a subject's missing follow-ups (up to `frames`) with synthesized
/// scans. Real scans and their ages are kept; new frames are flagged.
pub fn complete_sequence(
    record: &SubjectRecord,
    frames: usize,
    synth: &Synthesizer,
    ages: &AgeModel,
    seed: u64,
) -> Result<SubjectRecord> {
    record.validate()?;
    if record.frames() >= frames {
        return Ok(record.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut all_ages = record.ages.clone();
    for t in record.frames()..frames {
        let offset = ages
            .draw(record.label, t, &mut rng)
            .ok_or_else(|| Error::usage(format!("no age statistics for class {} frame {}", record.label, t + 1)))?;
        let prev = *all_ages.last().unwrap();
        // Keep ages strictly increasing even when draws collide.
        all_ages.push((record.baseline_age() + offset).max(prev + 0.1));
    }
    let req = SynthesisRequest {
        baseline: record.baseline.clone(),
        baseline_age: Some(record.baseline_age()),
        ages: all_ages[1..].to_vec(),
        label: record.label,
    };
    let syn = synth.synthesize(std::slice::from_ref(&req), seed)?.remove(0);
    let mut out = record.clone();
    out.ages = all_ages;
    out.followups.extend(syn.frames.into_iter().skip(record.frames()));
    out.synthetic.resize(frames, true);
    out.validate()?;
    Ok(out)
}

/// Writes one synthesized trajectory in the dataset layout: `frame_0.raw`
/// is the baseline, `frame_<i>.raw` the i-th synthetic follow-up, with
/// `deformation_<i>.raw` and, when labels are given, `labels_<i>.raw`.
pub fn write_sample(
    dir: &Path,
    subject_id: &str,
    label: DiseaseLabel,
    baseline: &ScalarVolume,
    baseline_age: f64,
    syn: &Synthesis,
    labels: Option<&[ScalarVolume]>,
) -> Result<SubjectManifest> {
    create_dir(dir)?;
    let mut files = vec!["frame_0.raw".to_string()];
    write_volume(&dir.join(&files[0]), baseline)?;
    for (t, (frame, phi)) in syn.frames.iter().zip(&syn.deformations).enumerate() {
        let name = format!("frame_{}.raw", t + 1);
        write_volume(&dir.join(&name), frame)?;
        write_field(&dir.join(format!("deformation_{}.raw", t + 1)), &phi.displacement)?;
        files.push(name);
    }
    for (t, l) in labels.unwrap_or_default().iter().enumerate() {
        write_volume(&dir.join(format!("labels_{}.raw", t + 1)), l)?;
    }
    let mut ages = vec![baseline_age];
    ages.extend(syn.velocities.ages());
    let mut synthetic_flags = vec![false];
    synthetic_flags.resize(files.len(), true);
    let manifest = SubjectManifest {
        subject_id: subject_id.to_string(),
        shape: baseline.shape().0,
        ages,
        label,
        files,
        synthetic_flags,
        ground_truth: None,
        field_boundary: syn.deformations.first().map(|phi| phi.displacement.boundary()),
    };
    manifest.validate()?;
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}
