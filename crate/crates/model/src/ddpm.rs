//! Cosine-schedule DDPM: forward corruption, ancestral predictor, Langevin
//! corrector and the predictor-corrector sampler.
//!
//! Steps are 1-based: `z⁰` is the clean datum and `τ ∈ {1..𝒯}`. Everything
//! here works on flat host buffers holding `batch` samples back to back.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_S_OFFSET: f64 = 0.008;
pub const MAX_BETA: f64 = 0.999;
pub const DEFAULT_SNR: f64 = 0.16;
pub const DEFAULT_CORRECTOR_STEPS: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    s_offset: f64,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

/// `ᾱ_τ = f(τ)/f(0)` with `f(t) = cos²(((t/𝒯 + s)/(1 + s))·π/2)`; β is
/// clipped at [`MAX_BETA`] and ᾱ is then rebuilt as the running product.
pub fn cosine_schedule(steps: usize, s_offset: f64) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::config(format!("diffusion needs at least 2 steps, got {steps}")));
    }
    if !(s_offset.is_finite() && s_offset >= 0.0) {
        return Err(Error::config(format!("cosine offset must be >= 0, got {s_offset}")));
    }
    let f = |t: f64| {
        let x = (t / steps as f64 + s_offset) / (1.0 + s_offset) * std::f64::consts::FRAC_PI_2;
        x.cos().powi(2)
    };
    let f0 = f(0.0);
    let closed: Vec<f64> = (0..=steps).map(|t| f(t as f64) / f0).collect();
    let beta: Vec<f64> = (1..=steps).map(|t| (1.0 - closed[t] / closed[t - 1]).min(MAX_BETA)).collect();
    Ok(NoiseSchedule::from_betas(steps, s_offset, beta))
}

impl NoiseSchedule {
    fn from_betas(steps: usize, s_offset: f64, beta: Vec<f64>) -> Self {
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        NoiseSchedule { steps, s_offset, beta, alpha, alpha_bar }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn s_offset(&self) -> f64 {
        self.s_offset
    }

    pub fn check(&self, tau: usize) -> Result<()> {
        if tau == 0 || tau > self.steps {
            return Err(Error::invalid(format!("diffusion step {tau} outside 1..={}", self.steps)));
        }
        Ok(())
    }

    pub fn beta(&self, tau: usize) -> f64 {
        self.beta[tau - 1]
    }

    pub fn alpha(&self, tau: usize) -> f64 {
        self.alpha[tau - 1]
    }

    pub fn alpha_bar(&self, tau: usize) -> f64 {
        self.alpha_bar[tau - 1]
    }

    /// `ᾱ_{τ-1}`, with `ᾱ_0 = 1`.
    pub fn alpha_bar_prev(&self, tau: usize) -> f64 {
        if tau == 1 {
            1.0
        } else {
            self.alpha_bar[tau - 2]
        }
    }

    /// Posterior variance `β̃_τ = β_τ (1 − ᾱ_{τ−1}) / (1 − ᾱ_τ)`; zero at τ = 1.
    pub fn posterior_variance(&self, tau: usize) -> f64 {
        self.beta(tau) * (1.0 - self.alpha_bar_prev(tau)) / (1.0 - self.alpha_bar(tau))
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn dump(&self) -> ScheduleDump {
        ScheduleDump {
            steps: self.steps,
            s_offset: self.s_offset,
            beta: self.beta.clone(),
            alpha_bar: self.alpha_bar.clone(),
        }
    }
}

/// Serialized form of a schedule, for audits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleDump {
    pub steps: usize,
    pub s_offset: f64,
    pub beta: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

fn same_len(a: &[f64], b: &[f64], what: &str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!("{what}: length {} does not match {}", b.len(), a.len())));
    }
    Ok(())
}

/// `z^τ = √ᾱ_τ z⁰ + √(1−ᾱ_τ) ε`.
pub fn forward_sample(z0: &[f64], tau: usize, eps: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>> {
    sched.check(tau)?;
    same_len(z0, eps, "noise")?;
    let (a, b) = (sched.alpha_bar(tau).sqrt(), (1.0 - sched.alpha_bar(tau)).sqrt());
    Ok(z0.iter().zip(eps).map(|(z, e)| a * z + b * e).collect())
}

/// Ancestral step `z^{τ−1} = (z^τ − β_τ/√(1−ᾱ_τ) ε̂)/√α_τ + σ_τ noise`
/// with `σ_τ² = β̃_τ`.
pub fn predictor_step(
    z: &[f64],
    eps_hat: &[f64],
    tau: usize,
    sched: &NoiseSchedule,
    noise: &[f64],
) -> Result<Vec<f64>> {
    sched.check(tau)?;
    same_len(z, eps_hat, "predicted noise")?;
    same_len(z, noise, "noise")?;
    let coef = sched.beta(tau) / (1.0 - sched.alpha_bar(tau)).sqrt();
    let inv_sqrt_alpha = 1.0 / sched.alpha(tau).sqrt();
    let sigma = if tau == 1 { 0.0 } else { sched.posterior_variance(tau).sqrt() };
    Ok(z.iter()
        .zip(eps_hat)
        .zip(noise)
        .map(|((z, e), n)| (z - coef * e) * inv_sqrt_alpha + sigma * n)
        .collect())
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// One Langevin refinement of a single sample at level τ, using the score
/// `−ε̂/√(1−ᾱ_τ)` and the step `2 α_τ (snr ‖noise‖ / ‖score‖)²`.
pub fn corrector_step(
    z: &[f64],
    eps_hat: &[f64],
    tau: usize,
    sched: &NoiseSchedule,
    snr: f64,
    noise: &[f64],
) -> Result<Vec<f64>> {
    sched.check(tau)?;
    same_len(z, eps_hat, "predicted noise")?;
    same_len(z, noise, "noise")?;
    if !(snr.is_finite() && snr >= 0.0) {
        return Err(Error::invalid(format!("corrector snr must be >= 0, got {snr}")));
    }
    let score_scale = -1.0 / (1.0 - sched.alpha_bar(tau)).sqrt();
    let score_norm = norm(eps_hat) * score_scale.abs();
    if snr == 0.0 || score_norm == 0.0 {
        return Ok(z.to_vec());
    }
    let step = 2.0 * sched.alpha(tau) * (snr * norm(noise) / score_norm).powi(2);
    let diffusion = (2.0 * step).sqrt();
    Ok(z.iter()
        .zip(eps_hat)
        .zip(noise)
        .map(|((z, e), n)| z + step * score_scale * e + diffusion * n)
        .collect())
}

/// Anything that predicts the noise in a batch of corrupted samples.
pub trait NoisePredictor {
    type Cond;

    /// `z` holds `taus.len()` samples back to back; the output has the
    /// same layout.
    fn predict_noise(&self, z: &[f64], taus: &[usize], cond: &Self::Cond) -> Result<Vec<f64>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Corrector applications per predictor step; 0 gives plain ancestral
    /// sampling.
    pub corrector_steps: usize,
    pub snr: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { corrector_steps: DEFAULT_CORRECTOR_STEPS, snr: DEFAULT_SNR }
    }
}

pub fn standard_normal(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn predict_checked<M: NoisePredictor>(
    model: &M,
    z: &[f64],
    tau: usize,
    batch: usize,
    cond: &M::Cond,
) -> Result<Vec<f64>> {
    let eps = model.predict_noise(z, &vec![tau; batch], cond)?;
    same_len(z, &eps, "model output")?;
    if eps.iter().any(|v| !v.is_finite()) {
        return Err(Error::SamplingFailed { step: tau });
    }
    Ok(eps)
}

/// Predictor-corrector sampling from `z^𝒯 ~ N(0, I)` down to `z⁰`.
///
/// Each predictor step moves from level τ to τ−1; the corrector then runs
/// `corrector_steps` times at the new level (never at level 0).
pub fn sample<M: NoisePredictor>(
    model: &M,
    cond: &M::Cond,
    batch: usize,
    dim: usize,
    sched: &NoiseSchedule,
    cfg: SamplerConfig,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    if batch == 0 || dim == 0 {
        return Err(Error::invalid("sample needs a non-empty batch"));
    }
    let mut z = standard_normal(batch * dim, rng);
    for tau in (1..=sched.steps()).rev() {
        let eps = predict_checked(model, &z, tau, batch, cond)?;
        let noise = if tau > 1 { standard_normal(z.len(), rng) } else { vec![0.0; z.len()] };
        z = predictor_step(&z, &eps, tau, sched, &noise)?;
        if tau == 1 {
            break;
        }
        for _ in 0..cfg.corrector_steps {
            let eps = predict_checked(model, &z, tau - 1, batch, cond)?;
            let noise = standard_normal(z.len(), rng);
            let mut next = Vec::with_capacity(z.len());
            for b in 0..batch {
                let r = b * dim..(b + 1) * dim;
                next.extend(corrector_step(&z[r.clone()], &eps[r.clone()], tau - 1, sched, cfg.snr, &noise[r])?);
            }
            z = next;
        }
    }
    Ok(z)
}

/// One training draw: a step per sample, the noise and the corrupted batch.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingDraw {
    pub taus: Vec<usize>,
    pub eps: Vec<f64>,
    pub z_tau: Vec<f64>,
}

/// Draws τ uniformly in `1..=𝒯` per sample and corrupts `z0` accordingly.
pub fn draw_training_example(
    z0: &[f64],
    batch: usize,
    sched: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<TrainingDraw> {
    if batch == 0 || z0.len() % batch != 0 {
        return Err(Error::invalid(format!("{} values do not split into {batch} samples", z0.len())));
    }
    let dim = z0.len() / batch;
    let taus: Vec<usize> = (0..batch).map(|_| rng.random_range(1..=sched.steps())).collect();
    let eps = standard_normal(z0.len(), rng);
    let mut z_tau = Vec::with_capacity(z0.len());
    for (b, &tau) in taus.iter().enumerate() {
        let r = b * dim..(b + 1) * dim;
        z_tau.extend(forward_sample(&z0[r.clone()], tau, &eps[r], sched)?);
    }
    Ok(TrainingDraw { taus, eps, z_tau })
}

/// Monte-Carlo estimate of `E‖ε − ε_θ(z^τ, τ, 𝒞)‖₁` (mean over elements).
pub fn diffusion_loss<M: NoisePredictor>(
    model: &M,
    z0: &[f64],
    batch: usize,
    cond: &M::Cond,
    sched: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<f64> {
    let draw = draw_training_example(z0, batch, sched, rng)?;
    let eps_hat = model.predict_noise(&draw.z_tau, &draw.taus, cond)?;
    same_len(&draw.eps, &eps_hat, "model output")?;
    Ok(draw.eps.iter().zip(&eps_hat).map(|(a, b)| (a - b).abs()).sum::<f64>() / draw.eps.len() as f64)
}
