//! Pairwise SVF registration.
//!
//! Minimizes `lambda * ssd(S ∘ exp(v), F) + |grad v|^2` over a stationary
//! velocity `v`. The gradient is computed with a hand-derived adjoint of
//! resampling, scaling-and-squaring and trilinear warping.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffeo::{integrate_history, DEFAULT_SQUARING_STEPS};
use crate::error::{Error, Result};
use crate::subject::SubjectRecord;
use crate::volume::{
    diff_stencil, resample, resample_field_transpose, sample_plane_grad, scatter_plane, stencils, Boundary,
    ScalarVolume, Shape, VectorField, VelocitySequence,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegistrationConfig {
    /// Data-term weight.
    pub lambda: f64,
    /// Optional separate data-term weight; aliases `lambda` when unset.
    #[serde(default)]
    pub eta: Option<f64>,
    pub iterations: usize,
    /// Largest per-iteration velocity update, in voxels.
    pub step_size: f64,
    pub squaring_steps: u32,
    /// Resolution at which `v` is optimized; defaults to the image shape.
    #[serde(default)]
    pub field_shape: Option<Shape>,
    /// Boundary of `v`; defaults to the template's.
    #[serde(default)]
    pub velocity_boundary: Option<Boundary>,
    pub max_halvings: u32,
    /// Relative energy decrease below which an iteration counts as stalled.
    pub tolerance: f64,
    /// Stalled iterations in a row before stopping.
    pub patience: usize,
    /// Gaussian width (voxels) of the gradient preconditioner; 0 disables it.
    pub precond_sigma: f64,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        RegistrationConfig {
            lambda: 100.0,
            eta: None,
            iterations: 150,
            step_size: 0.5,
            squaring_steps: DEFAULT_SQUARING_STEPS,
            field_shape: None,
            velocity_boundary: None,
            max_halvings: 20,
            tolerance: 1e-6,
            patience: 5,
            precond_sigma: 1.5,
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(format!("registration config: {m}")));
        if !(self.lambda > 0.0) {
            return bad("lambda must be > 0");
        }
        if let Some(eta) = self.eta {
            if !(eta > 0.0) {
                return bad("eta must be > 0");
            }
        }
        if self.iterations < 1 {
            return bad("iterations must be >= 1");
        }
        if !(self.step_size > 0.0) {
            return bad("step_size must be > 0");
        }
        if self.precond_sigma < 0.0 {
            return bad("precond_sigma must be >= 0");
        }
        Ok(())
    }

    /// Weight of the image term.
    pub fn data_weight(&self) -> f64 {
        self.eta.unwrap_or(self.lambda)
    }
}

/// Data and regularization terms of the registration energy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyTerms {
    pub ssd: f64,
    pub reg: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegistrationResult {
    pub velocity: VectorField,
    /// Energy after every accepted iteration, starting with the initial value.
    pub energy_trace: Vec<f64>,
    pub initial_ssd: f64,
    pub final_ssd: f64,
    pub final_reg: f64,
    pub squaring_steps: u32,
}

impl RegistrationResult {
    pub fn final_energy(&self) -> f64 {
        *self.energy_trace.last().expect("trace is never empty")
    }

    /// Fraction of the initial SSD removed.
    pub fn ssd_reduction(&self) -> f64 {
        if self.initial_ssd > 0.0 {
            1.0 - self.final_ssd / self.initial_ssd
        } else {
            0.0
        }
    }
}

fn same_shape(a: Shape, b: Shape) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch { expected: a.0, actual: b.0 });
    }
    Ok(())
}

/// Sum (not mean) of squared differences.
pub fn ssd(a: &ScalarVolume, b: &ScalarVolume) -> Result<f64> {
    same_shape(a.shape(), b.shape())?;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// Sum over voxels, components and axes of squared central differences.
pub fn smoothness(v: &VectorField) -> Result<f64> {
    let shape = v.shape();
    if shape.min_dim() < 3 {
        return Err(Error::invalid(format!("smoothness needs every axis >= 3, got {shape}")));
    }
    let mut total = 0.0;
    for c in 0..3 {
        let plane = v.component(c);
        for i in 0..shape.len() {
            let cc = shape.coords(i);
            for a in 0..3 {
                let d = crate::volume::plane_derivative(plane, shape, v.boundary(), cc, a);
                total += d * d;
            }
        }
    }
    Ok(total)
}

fn smoothness_gradient(v: &VectorField) -> VectorField {
    let shape = v.shape();
    let n = shape.len();
    let mut g = vec![0.0; 3 * n];
    for c in 0..3 {
        let plane = v.component(c);
        let out = &mut g[c * n..(c + 1) * n];
        for i in 0..n {
            let cc = shape.coords(i);
            for a in 0..3 {
                let (m, p, s) = diff_stencil(shape.0[a], cc[a], v.boundary());
                let mut cm = cc;
                let mut cp = cc;
                cm[a] = m;
                cp[a] = p;
                let im = shape.index(cm[0], cm[1], cm[2]);
                let ip = shape.index(cp[0], cp[1], cp[2]);
                let d = s * (plane[ip] - plane[im]);
                out[ip] += 2.0 * s * d;
                out[im] -= 2.0 * s * d;
            }
        }
    }
    VectorField::from_raw_parts(shape, g, v.boundary())
}

fn check_problem(v: &VectorField, s: &ScalarVolume, f: &ScalarVolume) -> Result<()> {
    same_shape(s.shape(), f.shape())?;
    if v.shape().min_dim() < 3 {
        return Err(Error::invalid(format!("velocity grid {} is too small", v.shape())));
    }
    Ok(())
}

fn warped_template(s: &ScalarVolume, u: &VectorField) -> Vec<f64> {
    let shape = s.shape();
    (0..shape.len())
        .into_par_iter()
        .map(|i| {
            let c = shape.coords(i);
            let d = u.at(i);
            s.sample_unchecked([c[0] as f64 + d[0], c[1] as f64 + d[1], c[2] as f64 + d[2]])
        })
        .collect()
}

/// Energy terms for velocity `v` (resampled to the image grid before
/// integration when the shapes differ).
pub fn energy_terms(v: &VectorField, s: &ScalarVolume, f: &ScalarVolume, cfg: &RegistrationConfig) -> Result<EnergyTerms> {
    check_problem(v, s, f)?;
    let vf = resample(v, s.shape())?;
    let (states, _) = integrate_history(&vf, cfg.squaring_steps);
    let warped = warped_template(s, states.last().expect("non-empty"));
    let ssd: f64 = warped.iter().zip(f.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    let reg = smoothness(v)?;
    Ok(EnergyTerms { ssd, reg, total: cfg.data_weight() * ssd + reg })
}

/// `lambda * ssd(warp(S, exp(v)), F) + smoothness(v)`.
pub fn energy(v: &VectorField, s: &ScalarVolume, f: &ScalarVolume, cfg: &RegistrationConfig) -> Result<f64> {
    Ok(energy_terms(v, s, f, cfg)?.total)
}

/// Adjoint of one squaring step `u' = u + u ∘ (id + u)`: maps `dE/du'` to
/// `dE/du`.
fn square_adjoint(u: &VectorField, g_next: &VectorField) -> VectorField {
    let shape = u.shape();
    let n = shape.len();
    let b = u.boundary();
    let mut g = g_next.data().to_vec();
    for i in 0..n {
        let c = shape.coords(i);
        let d = u.at(i);
        let p = [c[0] as f64 + d[0], c[1] as f64 + d[1], c[2] as f64 + d[2]];
        let st = stencils(shape, p, b);
        let gn = g_next.at(i);
        for comp in 0..3 {
            if gn[comp] == 0.0 {
                continue;
            }
            let plane = &u.data()[comp * n..(comp + 1) * n];
            let dp = sample_plane_grad(plane, shape, &st);
            for a in 0..3 {
                g[a * n + i] += gn[comp] * dp[a];
            }
            scatter_plane(&mut g[comp * n..(comp + 1) * n], shape, &st, gn[comp]);
        }
    }
    VectorField::from_raw_parts(shape, g, b)
}

/// Energy terms and `dE/dv`.
pub fn energy_and_gradient(
    v: &VectorField,
    s: &ScalarVolume,
    f: &ScalarVolume,
    cfg: &RegistrationConfig,
) -> Result<(EnergyTerms, VectorField)> {
    check_problem(v, s, f)?;
    let shape = s.shape();
    let n = shape.len();
    let vf = resample(v, shape)?;
    let (states, k) = integrate_history(&vf, cfg.squaring_steps);
    let u = states.last().expect("non-empty");
    let weight = cfg.data_weight();

    let mut ssd = 0.0;
    let mut g = vec![0.0; 3 * n];
    for i in 0..n {
        let c = shape.coords(i);
        let d = u.at(i);
        let p = [c[0] as f64 + d[0], c[1] as f64 + d[1], c[2] as f64 + d[2]];
        let st = stencils(shape, p, s.boundary());
        let r = crate::volume::sample_plane(s.data(), shape, &st) - f.data()[i];
        ssd += r * r;
        let ds = sample_plane_grad(s.data(), shape, &st);
        for a in 0..3 {
            g[a * n + i] = 2.0 * weight * r * ds[a];
        }
    }
    let mut grad = VectorField::from_raw_parts(shape, g, u.boundary());
    for state in states[..k as usize].iter().rev() {
        grad = square_adjoint(state, &grad);
    }
    let grad = grad.scaled(1.0 / 2f64.powi(k as i32));
    let grad = resample_field_transpose(&grad, v.shape());
    let reg = smoothness(v)?;
    let grad = grad.add(&smoothness_gradient(v))?;
    Ok((EnergyTerms { ssd, reg, total: weight * ssd + reg }, grad))
}

fn axpy(v: &VectorField, alpha: f64, d: &VectorField) -> VectorField {
    let data = v.data().iter().zip(d.data()).map(|(a, b)| a + alpha * b).collect();
    VectorField::from_raw_parts(v.shape(), data, v.boundary())
}

fn dot(a: &VectorField, b: &VectorField) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Preconditioned gradient descent with step halving, starting from `init`
/// (zero when `None`). Accepted energies never increase.
pub fn register_pair_from(
    s: &ScalarVolume,
    f: &ScalarVolume,
    cfg: &RegistrationConfig,
    init: Option<VectorField>,
) -> Result<RegistrationResult> {
    cfg.validate()?;
    same_shape(s.shape(), f.shape())?;
    let field_shape = cfg.field_shape.unwrap_or(s.shape());
    let mut v = match init {
        Some(v) => {
            same_shape(field_shape, v.shape())?;
            v
        }
        None => VectorField::zeros(field_shape, cfg.velocity_boundary.unwrap_or(s.boundary())),
    };
    let initial_ssd = ssd(s, f)?;
    let (mut terms, mut grad) = energy_and_gradient(&v, s, f, cfg)?;
    let mut trace = vec![terms.total];
    let max_step = 4.0 * cfg.step_size;
    let mut step = cfg.step_size;
    let mut stalled = 0;

    for _ in 0..cfg.iterations {
        let mut dir = grad.gaussian_smoothed(cfg.precond_sigma).negated();
        let norm = dir.max_norm();
        if norm == 0.0 {
            break;
        }
        dir = dir.scaled(1.0 / norm);
        let slope = dot(&grad, &dir);
        if slope >= 0.0 {
            break;
        }

        let mut accepted = None;
        for _ in 0..=cfg.max_halvings {
            let cand = axpy(&v, step, &dir);
            let e = energy_terms(&cand, s, f, cfg)?;
            if !e.total.is_finite() {
                return Err(Error::OptimizationFailed { reason: "energy became non-finite".into(), trace });
            }
            if e.total < terms.total {
                accepted = Some(cand);
                break;
            }
            step *= 0.5;
        }
        let Some(cand) = accepted else {
            // Only a failure when the linear model still promised a real decrease.
            if step * slope.abs() > 1e-9 * terms.total.abs().max(1e-300) {
                return Err(Error::OptimizationFailed {
                    reason: format!("energy increased for {} consecutive step halvings", cfg.max_halvings + 1),
                    trace,
                });
            }
            break;
        };
        let previous = terms.total;
        v = cand;
        let (t, g) = energy_and_gradient(&v, s, f, cfg)?;
        terms = t;
        grad = g;
        trace.push(terms.total);
        step = (step * 1.5).min(max_step);

        if previous - terms.total < cfg.tolerance * previous {
            stalled += 1;
            if stalled >= cfg.patience {
                break;
            }
        } else {
            stalled = 0;
        }
    }

    let squaring_steps = crate::diffeo::squaring_steps_for(&resample(&v, s.shape())?, cfg.squaring_steps);
    Ok(RegistrationResult {
        velocity: v,
        energy_trace: trace,
        initial_ssd,
        final_ssd: terms.ssd,
        final_reg: terms.reg,
        squaring_steps,
    })
}

/// Registers template `s` to fixed image `f` starting from a zero velocity.
pub fn register_pair(s: &ScalarVolume, f: &ScalarVolume, cfg: &RegistrationConfig) -> Result<RegistrationResult> {
    register_pair_from(s, f, cfg, None)
}

/// Registers the baseline independently to every follow-up. Frames are
/// solved in parallel; errors carry the 1-based follow-up index.
pub fn register_sequence_detailed(
    subject: &SubjectRecord,
    cfg: &RegistrationConfig,
) -> Result<(VelocitySequence, Vec<RegistrationResult>)> {
    subject.validate()?;
    if subject.followups.is_empty() {
        return Err(Error::invalid(format!("subject {} has no follow-up scans", subject.subject_id)));
    }
    let results: Vec<RegistrationResult> = subject
        .followups
        .par_iter()
        .enumerate()
        .map(|(t, f)| register_pair(&subject.baseline, f, cfg).map_err(|e| e.in_frame(t + 1)))
        .collect::<Result<_>>()?;
    let seq = VelocitySequence::new(
        results.iter().map(|r| r.velocity.clone()).collect(),
        subject.followup_ages().to_vec(),
    )?;
    Ok((seq, results))
}

pub fn register_sequence(subject: &SubjectRecord, cfg: &RegistrationConfig) -> Result<VelocitySequence> {
    Ok(register_sequence_detailed(subject, cfg)?.0)
}
