//! Stage 2: diffusion-transformer training on cached velocity sequences.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use morphoflow_model::DType;
use morphoflow_core::io::create_dir;
use morphoflow_core::VectorField;
use morphoflow_model::checkpoint;
use morphoflow_model::ldt::field_tokens;
use morphoflow_model::trainer::{Trainer, TrainingExample};
use morphoflow_model::{Ldt, SequenceCondition};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::stage1::CachedSequence;

pub const CONFIG_FILE: &str = "config.json";
pub const LOSS_FILE: &str = "losses.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
/// Window of the trailing mean used for smoothed losses.
pub const SMOOTHING_WINDOW: usize = 100;

/// Divisors mapping velocities and gradients to unit scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub velocity_scale: f64,
    pub gradient_scale: f64,
}

fn rms(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v * v;
        n += 1;
    }
    (sum / n.max(1) as f64).sqrt()
}

impl Normalization {
    /// Root-mean-square of all velocity and gradient components, floored so
    /// an all-zero cache still normalizes.
    pub fn from_sequences(seqs: &[CachedSequence]) -> Self {
        let v = rms(seqs.iter().flat_map(|s| s.velocities.frames().iter().flat_map(|f| f.data().iter().copied())));
        let g = rms(seqs.iter().flat_map(|s| s.gradient.data().iter().copied()));
        Normalization { velocity_scale: v.max(1e-6), gradient_scale: g.max(1e-6) }
    }
}

/// Metadata stored alongside the network weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointExtra {
    pub run: RunConfig,
    pub normalization: Normalization,
    pub subjects: Vec<String>,
}

pub fn condition_for(
    ages: &[f64],
    label: morphoflow_core::DiseaseLabel,
    gradient: &VectorField,
    cfg: &RunConfig,
    norm: &Normalization,
) -> Result<SequenceCondition> {
    let g = gradient.scaled(1.0 / norm.gradient_scale);
    Ok(SequenceCondition { ages: ages.to_vec(), label, grad_tokens: field_tokens(&g, cfg.patch_size)? })
}

pub fn training_examples(seqs: &[CachedSequence], cfg: &RunConfig, norm: &Normalization) -> Result<Vec<TrainingExample>> {
    seqs.iter()
        .map(|s| {
            if s.velocities.len() != cfg.frames || s.velocities.shape() != cfg.field_shape {
                return Err(Error::usage(format!(
                    "subject {}: {} frames of {}, config expects {} frames of {}",
                    s.subject_id,
                    s.velocities.len(),
                    s.velocities.shape(),
                    cfg.frames,
                    cfg.field_shape
                )));
            }
            let mut tokens = Vec::new();
            for f in s.velocities.frames() {
                tokens.extend(field_tokens(&f.scaled(1.0 / norm.velocity_scale), cfg.patch_size)?);
            }
            let cond = condition_for(s.velocities.ages(), s.label, &s.gradient, cfg, norm)?;
            Ok(TrainingExample { tokens, cond })
        })
        .collect()
}

/// Trailing mean over at most `window` values.
pub fn smoothed(losses: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut out = Vec::with_capacity(losses.len());
    let mut sum = 0.0;
    for (i, &l) in losses.iter().enumerate() {
        sum += l;
        if i >= w {
            sum -= losses[i - w];
        }
        out.push(sum / (i + 1).min(w) as f64);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainRun {
    pub config: RunConfig,
    pub loss_history: Vec<f64>,
    pub checkpoint: PathBuf,
    pub seed: u64,
}

/// An in-progress stage-2 run that can be stepped and saved.
pub struct Stage2 {
    trainer: Trainer,
    examples: Vec<TrainingExample>,
    cfg: RunConfig,
    norm: Normalization,
    subjects: Vec<String>,
    seed: u64,
    losses: Vec<f64>,
}

impl Stage2 {
    pub fn new(seqs: &[CachedSequence], cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        if seqs.is_empty() {
            return Err(Error::usage("no cached sequences to train on"));
        }
        let seed = cfg.resolved_seed();
        let norm = Normalization::from_sequences(seqs);
        let examples = training_examples(seqs, cfg, &norm)?;
        let model = Ldt::new(cfg.ldt_config()?, seed, DType::F32)?;
        let trainer = Trainer::new(model, cfg.schedule()?, cfg.lr, seed.wrapping_add(1))?;
        Ok(Stage2 {
            trainer,
            examples,
            cfg: cfg.clone(),
            norm,
            subjects: seqs.iter().map(|s| s.subject_id.clone()).collect(),
            seed,
            losses: vec![],
        })
    }

    pub fn normalization(&self) -> Normalization {
        self.norm
    }

    pub fn model(&self) -> &Ldt {
        self.trainer.model()
    }

    pub fn losses(&self) -> &[f64] {
        &self.losses
    }

    pub fn step(&mut self) -> Result<f64> {
        let idx = self.trainer.next_batch(self.examples.len(), self.cfg.batch);
        let batch: Vec<&TrainingExample> = idx.iter().map(|&i| &self.examples[i]).collect();
        let loss = self.trainer.train_step(&batch)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step: self.losses.len() + 1 });
        }
        self.losses.push(loss);
        Ok(loss)
    }

    /// Writes `config.json`, `losses.csv` and the final checkpoint under `out`.
    pub fn save(&self, out: &Path) -> Result<TrainRun> {
        create_dir(&out.join(CHECKPOINT_DIR))?;
        self.cfg.save(&out.join(CONFIG_FILE))?;
        let loss_path = out.join(LOSS_FILE);
        std::fs::write(&loss_path, losses_csv(&self.losses)).map_err(|e| Error::io(&loss_path, e))?;
        let ckpt = out.join(CHECKPOINT_DIR).join(FINAL_CHECKPOINT);
        let extra = CheckpointExtra { run: self.cfg.clone(), normalization: self.norm, subjects: self.subjects.clone() };
        let extra = serde_json::to_value(&extra).map_err(|e| Error::usage(e.to_string()))?;
        checkpoint::save(&ckpt, self.model(), self.trainer.schedule(), self.losses.len(), self.seed, extra)?;
        Ok(TrainRun { config: self.cfg.clone(), loss_history: self.losses.clone(), checkpoint: ckpt, seed: self.seed })
    }
}

pub fn losses_csv(losses: &[f64]) -> String {
    let mut s = String::from("step,loss,smoothed\n");
    for (i, (l, m)) in losses.iter().zip(smoothed(losses, SMOOTHING_WINDOW)).enumerate() {
        let _ = writeln!(s, "{},{l:.9},{m:.9}", i + 1);
    }
    s
}

/// Trains for `steps` updates and saves the run under `out`. `progress`
/// sees every step's loss.
pub fn train_stage2(
    seqs: &[CachedSequence],
    cfg: &RunConfig,
    steps: usize,
    out: &Path,
    mut progress: impl FnMut(usize, f64),
) -> Result<TrainRun> {
    let mut run = Stage2::new(seqs, cfg)?;
    for step in 1..=steps {
        let loss = run.step()?;
        progress(step, loss);
    }
    run.save(out)
}
