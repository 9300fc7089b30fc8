//! Run configuration: one strict JSON document shared by every stage.

use std::path::Path;

use morphoflow_core::diffeo::DEFAULT_SQUARING_STEPS;
use morphoflow_core::{Boundary, RegistrationConfig, Shape};
use morphoflow_model::ddpm::{DEFAULT_CORRECTOR_STEPS, DEFAULT_SNR, DEFAULT_STEPS, DEFAULT_S_OFFSET};
use morphoflow_model::{cosine_schedule, LdtConfig, NoiseSchedule, SamplerConfig};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub image_shape: Shape,
    /// Resolution of the velocity fields the diffusion model works on.
    pub field_shape: Shape,
    pub patch_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    /// Number of (spatial, temporal) block pairs.
    pub n_layers: usize,
    /// Follow-up frames per sequence.
    pub frames: usize,
    pub diffusion_steps: usize,
    #[serde(default = "default_s_offset")]
    pub s_offset: f64,
    pub lr: f64,
    pub batch: usize,
    /// Registration data-term weight.
    pub lambda: f64,
    #[serde(default = "default_reg_iterations")]
    pub reg_iterations: usize,
    /// Scaling-and-squaring steps.
    #[serde(rename = "K")]
    pub squaring_steps: u32,
    /// Domain of the velocity fields; images are always clamped.
    pub boundary: Boundary,
    #[serde(rename = "corrector_M")]
    pub corrector_steps: usize,
    pub snr: f64,
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_s_offset() -> f64 {
    DEFAULT_S_OFFSET
}

fn default_reg_iterations() -> usize {
    RegistrationConfig::default().iterations
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            image_shape: Shape::cube(32),
            field_shape: Shape::cube(16),
            patch_size: 4,
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            frames: 3,
            diffusion_steps: DEFAULT_STEPS,
            s_offset: DEFAULT_S_OFFSET,
            lr: 1e-4,
            batch: 4,
            lambda: RegistrationConfig::default().lambda,
            reg_iterations: default_reg_iterations(),
            squaring_steps: DEFAULT_SQUARING_STEPS,
            boundary: Boundary::Wrap,
            corrector_steps: DEFAULT_CORRECTOR_STEPS,
            snr: DEFAULT_SNR,
            seed: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::usage(format!("config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(morphoflow_core::io::write_json(path, self)?)
    }

    /// Applies a named model size on top of this configuration.
    pub fn with_preset(mut self, name: &str) -> Result<Self> {
        let p = LdtConfig::preset(name, self.field_shape, self.frames)?;
        self.d_model = p.d_model;
        self.n_heads = p.n_heads;
        self.n_layers = p.n_layers;
        self.patch_size = p.patch_size;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::usage(format!(
                "config schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.image_shape.is_empty() || self.field_shape.is_empty() {
            return Err(Error::usage("image_shape and field_shape must be positive"));
        }
        if !(self.lr > 0.0) || self.batch == 0 || self.frames == 0 {
            return Err(Error::usage("lr, batch and frames must be positive"));
        }
        if !(self.snr > 0.0) {
            return Err(Error::usage("snr must be positive"));
        }
        self.ldt_config()?;
        self.registration()?;
        self.schedule()?;
        Ok(())
    }

    pub fn ldt_config(&self) -> Result<LdtConfig> {
        let cfg = LdtConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_layers: self.n_layers,
            patch_size: self.patch_size,
            pe_dim: None,
            input_channels: 3,
            max_frames: self.frames,
            field_shape: self.field_shape,
            mlp_ratio: 4,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn registration(&self) -> Result<RegistrationConfig> {
        let cfg = RegistrationConfig {
            lambda: self.lambda,
            iterations: self.reg_iterations,
            squaring_steps: self.squaring_steps,
            field_shape: (self.field_shape != self.image_shape).then_some(self.field_shape),
            velocity_boundary: Some(self.boundary),
            ..RegistrationConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        Ok(cosine_schedule(self.diffusion_steps, self.s_offset)?)
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig { corrector_steps: self.corrector_steps, snr: self.snr }
    }

    /// Explicit seed, else `MORPHOFLOW_SEED`, else 0.
    pub fn resolved_seed(&self) -> u64 {
        self.seed.or_else(env_seed).unwrap_or(0)
    }
}

/// Seed from the `MORPHOFLOW_SEED` environment variable, if set and valid.
pub fn env_seed() -> Option<u64> {
    std::env::var("MORPHOFLOW_SEED").ok().and_then(|s| s.trim().parse().ok())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_and_validates() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        assert!(text.contains("\"K\"") && text.contains("\"corrector_M\""));
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut v = serde_json::to_value(RunConfig::default()).unwrap();
        v["learning_rate"] = serde_json::json!(0.1);
        assert!(serde_json::from_value::<RunConfig>(v).is_err());
    }

    #[test]
    fn bad_values_are_usage_errors() {
        let bad = RunConfig { patch_size: 5, ..RunConfig::default() };
        assert_eq!(bad.validate().unwrap_err().exit_code(), 2);
        let bad = RunConfig { schema_version: 9, ..RunConfig::default() };
        assert_eq!(bad.validate().unwrap_err().exit_code(), 2);
        assert_eq!(RunConfig::default().with_preset("S").unwrap().d_model, 384);
    }

    #[test]
    fn registration_uses_low_resolution_field() {
        let reg = RunConfig::default().registration().unwrap();
        assert_eq!(reg.field_shape, Some(Shape::cube(16)));
        let same = RunConfig { field_shape: Shape::cube(32), ..RunConfig::default() };
        assert_eq!(same.registration().unwrap().field_shape, None);
    }
}
