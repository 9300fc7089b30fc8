//! Deterministic longitudinal phantoms.
//!
//! A phantom is an ellipsoidal "brain" with a central "ventricle" sphere and
//! a textured "cortex" shell. Follow-ups are the baseline pulled back through
//! the flow of a radial velocity field: a compact bump around the ventricle
//! surface pulls samples inward (the ventricle grows) and a bump around the
//! outer surface pushes them outward (the brain shrinks, the shell thins).
//! The flow is radial, so the exact deformation comes from a scalar ODE.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetIndex, GroundTruthFiles, IndexEntry, Split, SubjectManifest, MANIFEST_FILE};
use crate::diffeo::DeformationField;
use crate::error::{Error, Result};
use crate::io::{create_dir, write_field, write_json, write_volume};
use crate::subject::{DiseaseLabel, SubjectRecord};
use crate::volume::{Boundary, ScalarVolume, Shape, VectorField};

pub const LABEL_BACKGROUND: u8 = 0;
pub const LABEL_VENTRICLE: u8 = 1;
pub const LABEL_TISSUE: u8 = 2;
pub const LABEL_CORTEX: u8 = 3;

const WM_INTENSITY: f64 = 0.9;
const CORTEX_INTENSITY: f64 = 0.55;
const TEXTURE_AMPLITUDE: f64 = 0.12;
const VENTRICLE_INTENSITY: f64 = 0.15;
/// Cortex occupies ellipsoidal radius in [CORTEX_INNER, 1].
const CORTEX_INNER: f64 = 0.75;
/// Logistic edge width in voxels.
const EDGE: f64 = 0.5;
const RK4_STEPS: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub shape: Shape,
    pub n_subjects: usize,
    pub frames: usize,
    /// Baseline and every follow-up age fall inside this range.
    pub age_range: (f64, f64),
    /// Proportions of CN, MCI and AD subjects.
    pub class_mix: [f64; 3],
    /// Atrophy per year as a fraction of the brain radius, per class.
    pub atrophy_rate: [f64; 3],
    pub noise_sigma: f64,
    pub seed: u64,
    /// Range of the gap in years between consecutive visits.
    #[serde(default = "default_visit_gap")]
    pub visit_gap: (f64, f64),
}

fn default_visit_gap() -> (f64, f64) {
    (1.0, 3.0)
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            shape: Shape::cube(32),
            n_subjects: 8,
            frames: 3,
            age_range: (55.0, 92.0),
            class_mix: [1.0 / 3.0; 3],
            atrophy_rate: [0.005, 0.015, 0.03],
            noise_sigma: 0.005,
            seed: 0,
            visit_gap: default_visit_gap(),
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.shape.min_dim() < 8 {
            return Err(Error::invalid(format!("phantom shape {} is too small (need >= 8 per axis)", self.shape)));
        }
        if self.n_subjects == 0 || self.frames == 0 {
            return Err(Error::invalid("n_subjects and frames must be positive"));
        }
        if self.class_mix.iter().any(|p| !(p.is_finite() && *p >= 0.0))
            || (self.class_mix.iter().sum::<f64>() - 1.0).abs() > 1e-6
        {
            return Err(Error::invalid(format!("class_mix must be proportions summing to 1, got {:?}", self.class_mix)));
        }
        if self.atrophy_rate.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(Error::invalid(format!("atrophy rates must be >= 0, got {:?}", self.atrophy_rate)));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::invalid("noise_sigma must be >= 0"));
        }
        let (lo, hi) = self.age_range;
        let (g0, g1) = self.visit_gap;
        if !(lo.is_finite() && hi.is_finite() && g0 > 0.0 && g1 >= g0 && g1.is_finite()) {
            return Err(Error::invalid("age_range and visit_gap must be finite with positive gaps"));
        }
        if hi - lo < self.frames as f64 * g1 {
            return Err(Error::invalid(format!(
                "age range {lo}..{hi} cannot hold {} visits with gaps up to {g1}",
                self.frames
            )));
        }
        Ok(())
    }

    /// Class of subject `index`, assigned in contiguous blocks by `class_mix`.
    pub fn label_for(&self, index: usize) -> DiseaseLabel {
        let u = (index as f64 + 0.5) / self.n_subjects as f64;
        let mut acc = 0.0;
        for (k, p) in self.class_mix.iter().enumerate() {
            acc += p;
            if u < acc {
                return DiseaseLabel::ALL[k];
            }
        }
        *DiseaseLabel::ALL.iter().rev().find(|l| self.class_mix[l.index()] > 0.0).unwrap_or(&DiseaseLabel::Ad)
    }

    pub fn subject_id(index: usize) -> String {
        format!("sub-{index:03}")
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Per-subject seed; independent of generation order.
pub fn subject_seed(seed: u64, index: usize) -> u64 {
    splitmix64(seed ^ splitmix64(index as u64 ^ 0x5u64.rotate_left(61)))
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Smooth bump supported on |s| < 1 with peak 1 at s = 0.
fn bump(s: f64) -> f64 {
    if s.abs() >= 1.0 {
        0.0
    } else {
        (1.0 - 1.0 / (1.0 - s * s)).exp()
    }
}

/// Anatomy of one subject in voxel coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub center: [f64; 3],
    pub radii: [f64; 3],
    pub ventricle_radius: f64,
    texture_phase: [f64; 3],
    texture_wavelength: f64,
}

impl Phantom {
    pub fn random(shape: Shape, rng: &mut impl Rng) -> Self {
        let d = shape.dims();
        let mut center = [0.0; 3];
        let mut radii = [0.0; 3];
        for a in 0..3 {
            let n = d[a] as f64;
            center[a] = (n - 1.0) / 2.0 + rng.random_range(-0.02..0.02) * n;
            radii[a] = 0.34 * n * rng.random_range(0.95..1.05);
        }
        let mean_r = radii.iter().sum::<f64>() / 3.0;
        let texture_phase = [
            rng.random_range(0.0..std::f64::consts::TAU),
            rng.random_range(0.0..std::f64::consts::TAU),
            rng.random_range(0.0..std::f64::consts::TAU),
        ];
        Phantom {
            center,
            radii,
            ventricle_radius: 0.35 * mean_r * rng.random_range(0.9..1.1),
            texture_phase,
            texture_wavelength: (shape.min_dim() as f64 / 5.0).max(4.0),
        }
    }

    pub fn mean_radius(&self) -> f64 {
        self.radii.iter().sum::<f64>() / 3.0
    }

    fn ellipsoidal_radius(&self, p: [f64; 3]) -> f64 {
        (0..3).map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2)).sum::<f64>().sqrt()
    }

    fn distance(&self, p: [f64; 3]) -> f64 {
        (0..3).map(|a| (p[a] - self.center[a]).powi(2)).sum::<f64>().sqrt()
    }

    /// Baseline intensity at a continuous position.
    pub fn intensity(&self, p: [f64; 3]) -> f64 {
        let rho = self.ellipsoidal_radius(p);
        let scale = self.mean_radius() / EDGE;
        let brain = logistic((1.0 - rho) * scale);
        let cortex = logistic((rho - CORTEX_INNER) * scale);
        let ventricle = logistic((self.ventricle_radius - self.distance(p)) / EDGE);
        let k = std::f64::consts::TAU / self.texture_wavelength;
        let texture = (0..3).map(|a| (k * p[a] + self.texture_phase[a]).sin()).product::<f64>();
        let tissue = WM_INTENSITY * (1.0 - cortex) + (CORTEX_INTENSITY + TEXTURE_AMPLITUDE * texture) * cortex;
        brain * (tissue * (1.0 - ventricle) + VENTRICLE_INTENSITY * ventricle)
    }

    /// Baseline label at a continuous position.
    pub fn label(&self, p: [f64; 3]) -> u8 {
        let rho = self.ellipsoidal_radius(p);
        if rho >= 1.0 {
            LABEL_BACKGROUND
        } else if self.distance(p) < self.ventricle_radius {
            LABEL_VENTRICLE
        } else if rho >= CORTEX_INNER {
            LABEL_CORTEX
        } else {
            LABEL_TISSUE
        }
    }

    /// Radial speed profile of the atrophy field for unit magnitude.
    fn profile(&self, r: f64) -> f64 {
        let rv = self.ventricle_radius;
        let rb = self.mean_radius();
        -bump((r - rv) / rv) + bump((r - rb) / (0.3 * rb))
    }

    /// Atrophy velocity at `p` for displacement magnitude `m` voxels.
    pub fn velocity(&self, p: [f64; 3], m: f64) -> [f64; 3] {
        let r = self.distance(p);
        if r == 0.0 || m == 0.0 {
            return [0.0; 3];
        }
        let s = m * self.profile(r) / r;
        [s * (p[0] - self.center[0]), s * (p[1] - self.center[1]), s * (p[2] - self.center[2])]
    }

    /// Time-one flow of the atrophy field, as a displacement.
    pub fn flow(&self, p: [f64; 3], m: f64) -> [f64; 3] {
        let r0 = self.distance(p);
        if r0 == 0.0 || m == 0.0 {
            return [0.0; 3];
        }
        let f = |r: f64| m * self.profile(r);
        let h = 1.0 / RK4_STEPS as f64;
        let mut r = r0;
        for _ in 0..RK4_STEPS {
            let k1 = f(r);
            let k2 = f(r + 0.5 * h * k1);
            let k3 = f(r + 0.5 * h * k2);
            let k4 = f(r + h * k3);
            r += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        let s = r / r0 - 1.0;
        [s * (p[0] - self.center[0]), s * (p[1] - self.center[1]), s * (p[2] - self.center[2])]
    }

    pub fn render_baseline(&self, shape: Shape) -> ScalarVolume {
        voxel_volume(shape, |p| self.intensity(p))
    }

    pub fn render_labels(&self, shape: Shape) -> ScalarVolume {
        voxel_volume(shape, |p| self.label(p) as f64)
    }

    /// Noise-free follow-up for displacement magnitude `m`.
    pub fn render_followup(&self, shape: Shape, m: f64) -> Frame {
        let velocity = VectorField::from_fn(shape, Boundary::Clamp, |c| self.velocity(to_point(c), m))
            .expect("analytic field is finite");
        let displacement = VectorField::from_fn(shape, Boundary::Clamp, |c| self.flow(to_point(c), m))
            .expect("analytic field is finite");
        let mapped = |c: [usize; 3]| {
            let p = to_point(c);
            let u = displacement_at(&displacement, shape, c);
            [p[0] + u[0], p[1] + u[1], p[2] + u[2]]
        };
        let image = voxel_volume_idx(shape, |c| self.intensity(mapped(c)));
        let labels = voxel_volume_idx(shape, |c| self.label(mapped(c)) as f64);
        Frame { image, labels, velocity, deformation: DeformationField::from_displacement(displacement) }
    }
}

fn to_point(c: [usize; 3]) -> [f64; 3] {
    [c[0] as f64, c[1] as f64, c[2] as f64]
}

fn displacement_at(field: &VectorField, shape: Shape, c: [usize; 3]) -> [f64; 3] {
    field.at(shape.index(c[0], c[1], c[2]))
}

fn voxel_volume(shape: Shape, f: impl Fn([f64; 3]) -> f64 + Sync) -> ScalarVolume {
    voxel_volume_idx(shape, |c| f(to_point(c)))
}

fn voxel_volume_idx(shape: Shape, f: impl Fn([usize; 3]) -> f64 + Sync) -> ScalarVolume {
    let data: Vec<f64> = (0..shape.len()).into_par_iter().map(|i| f(shape.coords(i))).collect();
    ScalarVolume::new(shape, data, Boundary::Clamp).expect("phantom intensities are finite")
}

/// One rendered follow-up with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub image: ScalarVolume,
    pub labels: ScalarVolume,
    pub velocity: VectorField,
    pub deformation: DeformationField,
}

/// A generated subject: noisy scans plus exact ground truth per follow-up.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedSubject {
    pub record: SubjectRecord,
    pub phantom: Phantom,
    pub velocities: Vec<VectorField>,
    pub deformations: Vec<DeformationField>,
    pub segmentations: Vec<ScalarVolume>,
}

fn add_noise(vol: &ScalarVolume, sigma: f64, rng: &mut impl Rng) -> ScalarVolume {
    if sigma == 0.0 {
        return vol.clone();
    }
    let normal = Normal::new(0.0, sigma).expect("sigma validated");
    let data = vol.data().iter().map(|v| v + normal.sample(rng)).collect();
    ScalarVolume::new(vol.shape(), data, vol.boundary()).expect("finite")
}

/// Generates subject `index` of the cohort described by `spec`.
pub fn generate_subject(spec: &PhantomSpec, index: usize) -> Result<GeneratedSubject> {
    generate_subject_with(spec, &PhantomSpec::subject_id(index), spec.label_for(index), subject_seed(spec.seed, index))
}

/// Generates a subject with an explicit label and seed. Geometry, ages and
/// noise depend only on the seed, so subjects that differ only in label see
/// the same anatomy and visit schedule.
pub fn generate_subject_with(
    spec: &PhantomSpec,
    subject_id: &str,
    label: DiseaseLabel,
    seed: u64,
) -> Result<GeneratedSubject> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phantom = Phantom::random(spec.shape, &mut rng);
    let (g0, g1) = spec.visit_gap;
    let gaps: Vec<f64> = (0..spec.frames).map(|_| if g1 > g0 { rng.random_range(g0..g1) } else { g0 }).collect();
    let span: f64 = gaps.iter().sum();
    let (lo, hi) = spec.age_range;
    let a0 = if hi - span > lo { rng.random_range(lo..hi - span) } else { lo };
    let mut ages = vec![a0];
    for g in &gaps {
        ages.push(ages.last().unwrap() + g);
    }

    let rate = spec.atrophy_rate[label.index()];
    let frames: Vec<Frame> = ages[1..]
        .par_iter()
        .map(|a| phantom.render_followup(spec.shape, rate * (a - a0) * phantom.mean_radius()))
        .collect();

    let baseline = add_noise(&phantom.render_baseline(spec.shape), spec.noise_sigma, &mut rng);
    let mut followups = Vec::with_capacity(frames.len());
    let mut velocities = Vec::with_capacity(frames.len());
    let mut deformations = Vec::with_capacity(frames.len());
    let mut segmentations = Vec::with_capacity(frames.len());
    for f in frames {
        followups.push(add_noise(&f.image, spec.noise_sigma, &mut rng));
        velocities.push(f.velocity);
        deformations.push(f.deformation);
        segmentations.push(f.labels);
    }
    let record = SubjectRecord::new(subject_id, baseline, followups, ages, label)?
        .with_segmentation(phantom.render_labels(spec.shape))?;
    Ok(GeneratedSubject { record, phantom, velocities, deformations, segmentations })
}

/// Writes one generated subject and returns its manifest.
pub fn write_subject(dir: &Path, subject: &GeneratedSubject) -> Result<SubjectManifest> {
    create_dir(dir)?;
    let rec = &subject.record;
    let mut files = Vec::new();
    for (t, v) in std::iter::once(&rec.baseline).chain(&rec.followups).enumerate() {
        let name = format!("vol_{t}.raw");
        write_volume(&dir.join(&name), v)?;
        files.push(name);
    }
    let mut gt = GroundTruthFiles {
        velocity: vec![],
        deformation: vec![],
        segmentation: "seg_0.raw".into(),
        segmentations: vec![],
    };
    write_volume(&dir.join(&gt.segmentation), rec.segmentation.as_ref().expect("generated with labels"))?;
    for t in 1..=rec.frames() {
        let (v, d, s) = (format!("gt_velocity_{t}.raw"), format!("gt_deformation_{t}.raw"), format!("seg_{t}.raw"));
        write_field(&dir.join(&v), &subject.velocities[t - 1])?;
        write_field(&dir.join(&d), &subject.deformations[t - 1].displacement)?;
        write_volume(&dir.join(&s), &subject.segmentations[t - 1])?;
        gt.velocity.push(v);
        gt.deformation.push(d);
        gt.segmentations.push(s);
    }
    let manifest = SubjectManifest {
        subject_id: rec.subject_id.clone(),
        shape: rec.shape().0,
        ages: rec.ages.clone(),
        label: rec.label,
        synthetic_flags: vec![false; files.len()],
        files,
        ground_truth: Some(gt),
        field_boundary: subject.deformations.first().map(|phi| phi.displacement.boundary()),
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// Held-out subject ids: 15% of the cohort (at least one when n > 1),
/// chosen by a seeded shuffle.
pub fn split_subjects(ids: &[String], seed: u64) -> Split {
    use rand::seq::SliceRandom;
    let n = ids.len();
    let n_test = if n > 1 { ((0.15 * n as f64).round() as usize).max(1) } else { 0 };
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(splitmix64(seed ^ 0x7E57)));
    let mut test: Vec<usize> = order[..n_test].to_vec();
    test.sort_unstable();
    let mut split = Split::default();
    for (i, id) in ids.iter().enumerate() {
        if test.contains(&i) {
            split.test.push(id.clone());
        } else {
            split.train.push(id.clone());
        }
    }
    split
}

/// Generates the whole cohort under `out_dir`.
pub fn generate_dataset(spec: &PhantomSpec, out_dir: &Path) -> Result<DatasetIndex> {
    spec.validate()?;
    create_dir(out_dir)?;
    let entries = (0..spec.n_subjects)
        .into_par_iter()
        .map(|i| {
            let subject = generate_subject(spec, i)?;
            let id = subject.record.subject_id.clone();
            write_subject(&out_dir.join(&id), &subject)?;
            Ok(IndexEntry { subject_id: id.clone(), dir: id, label: subject.record.label })
        })
        .collect::<Result<Vec<_>>>()?;
    let ids: Vec<String> = entries.iter().map(|e| e.subject_id.clone()).collect();
    let index = DatasetIndex {
        split: split_subjects(&ids, spec.seed),
        subjects: entries,
        generator: serde_json::to_value(spec).expect("spec serializes"),
    };
    index.save(out_dir)?;
    Ok(index)
}

/// Smooth random vector field: Gaussian-smoothed white noise rescaled so the
/// largest vector has norm `max_norm`.
pub fn smooth_random_field(shape: Shape, boundary: Boundary, sigma: f64, max_norm: f64, seed: u64) -> VectorField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let data: Vec<f64> = (0..3 * shape.len()).map(|_| normal.sample(&mut rng)).collect();
    let field = VectorField::new(shape, data, boundary).expect("finite").gaussian_smoothed(sigma);
    let m = field.max_norm();
    if m == 0.0 {
        field
    } else {
        field.scaled(max_norm / m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffeo::{detjac_stats, integrate_svf, jacobian_determinant, warp, WarpMode};
    use crate::metrics::psnr;

    fn count(vol: &ScalarVolume, label: u8) -> usize {
        vol.data().iter().filter(|v| **v == label as f64).count()
    }

    fn spec(n: usize) -> PhantomSpec {
        PhantomSpec { shape: Shape::cube(24), n_subjects: n, ..PhantomSpec::default() }
    }

    #[test]
    fn zero_gap_follow_up_equals_baseline() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = Phantom::random(Shape::cube(16), &mut rng);
        let f = p.render_followup(Shape::cube(16), 0.0);
        assert_eq!(f.image, p.render_baseline(Shape::cube(16)));
        assert_eq!(f.labels, p.render_labels(Shape::cube(16)));
        assert!(f.deformation.is_identity());
    }

    #[test]
    fn ventricle_grows_with_age() {
        for label in DiseaseLabel::ALL {
            let s = PhantomSpec { shape: Shape::cube(32), ..spec(1) };
            let g = generate_subject_with(&s, "x", label, 11).unwrap();
            let mut counts = vec![count(g.record.segmentation.as_ref().unwrap(), LABEL_VENTRICLE)];
            counts.extend(g.segmentations.iter().map(|seg| count(seg, LABEL_VENTRICLE)));
            assert!(counts.windows(2).all(|w| w[1] > w[0]), "{label}: {counts:?}");
        }
    }

    #[test]
    fn ad_grows_faster_than_cn() {
        let s = spec(1);
        let cn = generate_subject_with(&s, "x", DiseaseLabel::Cn, 5).unwrap();
        let ad = generate_subject_with(&s, "x", DiseaseLabel::Ad, 5).unwrap();
        assert_eq!(cn.record.ages, ad.record.ages);
        let base = count(cn.record.segmentation.as_ref().unwrap(), LABEL_VENTRICLE);
        let grow = |g: &GeneratedSubject| count(&g.segmentations[2], LABEL_VENTRICLE) - base;
        assert!(grow(&ad) > grow(&cn));
    }

    #[test]
    fn shell_thins() {
        let s = spec(1);
        let g = generate_subject_with(&s, "x", DiseaseLabel::Ad, 2).unwrap();
        let base = count(g.record.segmentation.as_ref().unwrap(), LABEL_CORTEX);
        assert!(count(&g.segmentations[2], LABEL_CORTEX) < base);
    }

    fn integration_gap(n: usize) -> f64 {
        let s = PhantomSpec { shape: Shape::cube(n), ..spec(1) };
        let g = generate_subject_with(&s, "x", DiseaseLabel::Ad, 9).unwrap();
        let (v, d) = (&g.velocities[2], &g.deformations[2]);
        let phi = integrate_svf(v, 7).unwrap();
        let worst = phi.displacement.data().iter().zip(d.displacement.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst / v.max_norm()
    }

    // Scaling and squaring on the grid only approximates the exact radial
    // flow; the gap is discretization and shrinks with resolution.
    #[test]
    fn flow_matches_integrated_velocity() {
        let coarse = integration_gap(24);
        let fine = integration_gap(48);
        assert!(fine < coarse, "{fine} vs {coarse}");
        assert!(integration_gap(32) < 0.1);
    }

    #[test]
    fn analytic_deformations_fold_free() {
        let g = generate_subject_with(&spec(1), "x", DiseaseLabel::Ad, 4).unwrap();
        for d in &g.deformations {
            let stats = detjac_stats(&jacobian_determinant(d).unwrap()).unwrap();
            assert_eq!(stats.negative_fraction, 0.0);
        }
    }

    #[test]
    fn follow_up_is_warped_baseline() {
        let s = PhantomSpec { noise_sigma: 0.0, ..spec(1) };
        let g = generate_subject_with(&s, "x", DiseaseLabel::Ad, 6).unwrap();
        let warped = warp(&g.record.baseline, &g.deformations[2], WarpMode::Linear).unwrap();
        assert!(psnr(&warped, &g.record.followups[2], None).unwrap() > 30.0);
    }

    #[test]
    fn labels_follow_mix() {
        let s = PhantomSpec { n_subjects: 9, ..spec(9) };
        let labels: Vec<_> = (0..9).map(|i| s.label_for(i)).collect();
        for l in DiseaseLabel::ALL {
            assert_eq!(labels.iter().filter(|x| **x == l).count(), 3);
        }
        let only_ad = PhantomSpec { class_mix: [0.0, 0.0, 1.0], ..s };
        assert!((0..9).all(|i| only_ad.label_for(i) == DiseaseLabel::Ad));
    }

    #[test]
    fn spec_validation() {
        assert!(spec(1).validate().is_ok());
        assert!(PhantomSpec { class_mix: [0.5, 0.5, 0.5], ..spec(1) }.validate().is_err());
        assert!(PhantomSpec { atrophy_rate: [-0.1, 0.0, 0.0], ..spec(1) }.validate().is_err());
        assert!(PhantomSpec { shape: Shape::cube(4), ..spec(1) }.validate().is_err());
        assert!(PhantomSpec { age_range: (60.0, 62.0), ..spec(1) }.validate().is_err());
    }

    #[test]
    fn split_ratio() {
        let ids: Vec<String> = (0..20).map(PhantomSpec::subject_id).collect();
        let split = split_subjects(&ids, 1);
        assert_eq!(split.test.len(), 3);
        assert_eq!(split.train.len(), 17);
        assert_eq!(split_subjects(&ids, 1), split);
    }

    #[test]
    fn dataset_is_deterministic() {
        let s = PhantomSpec { shape: Shape::cube(12), n_subjects: 3, frames: 2, ..PhantomSpec::default() };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let index = generate_dataset(&s, a.path()).unwrap();
        generate_dataset(&s, b.path()).unwrap();
        assert_eq!(index.subjects.len(), 3);
        for e in &index.subjects {
            for f in std::fs::read_dir(a.path().join(&e.dir)).unwrap() {
                let f = f.unwrap();
                let other = b.path().join(&e.dir).join(f.file_name());
                assert_eq!(std::fs::read(f.path()).unwrap(), std::fs::read(other).unwrap());
            }
        }
        let rec = crate::dataset::load_subject(&a.path().join("sub-001")).unwrap();
        assert_eq!(rec.frames(), 2);
        assert!(rec.segmentation.is_some());
    }

    #[test]
    fn random_field_is_normalized() {
        let f = smooth_random_field(Shape::cube(8), Boundary::Wrap, 1.5, 2.0, 1);
        assert!((f.max_norm() - 2.0).abs() < 1e-12);
    }
}
