//! Diffeomorphisms generated by stationary velocity fields.
//!
//! A deformation is stored as a displacement `u`, with `phi(x) = x + u(x)`,
//! so the identity is the zero field. `exp(v)` is computed by scaling and
//! squaring: `u_0 = v / 2^K`, then `u_{k+1}(x) = u_k(x) + u_k(x + u_k(x))`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{plane_derivative, Boundary, ScalarVolume, Shape, VectorField};

/// Default number of squaring steps.
pub const DEFAULT_SQUARING_STEPS: u32 = 7;

/// Largest per-step displacement (voxels) allowed before `K` is raised.
pub const MAX_STEP_DISPLACEMENT: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct DeformationField {
    pub displacement: VectorField,
    /// Squaring steps used to produce the field (0 for fields built directly).
    pub squaring_steps: u32,
}

impl DeformationField {
    pub fn identity(shape: Shape, boundary: Boundary) -> Self {
        DeformationField { displacement: VectorField::zeros(shape, boundary), squaring_steps: 0 }
    }

    pub fn from_displacement(displacement: VectorField) -> Self {
        DeformationField { displacement, squaring_steps: 0 }
    }

    pub fn shape(&self) -> Shape {
        self.displacement.shape()
    }

    pub fn is_identity(&self) -> bool {
        self.displacement.data().iter().all(|&v| v == 0.0)
    }

    /// `phi(x)` at a lattice voxel.
    pub fn map_voxel(&self, c: [usize; 3]) -> [f64; 3] {
        let u = self.displacement.at(self.shape().index(c[0], c[1], c[2]));
        [c[0] as f64 + u[0], c[1] as f64 + u[1], c[2] as f64 + u[2]]
    }
}

/// Smallest `K' >= k` with `max|v| / 2^K' <= 0.5` voxel.
pub fn squaring_steps_for(v: &VectorField, k: u32) -> u32 {
    let m = v.max_norm();
    let mut k = k;
    while m / 2f64.powi(k as i32) > MAX_STEP_DISPLACEMENT {
        k += 1;
    }
    k
}

/// One squaring step: `u(x) + u(x + u(x))`.
pub(crate) fn square(u: &VectorField) -> VectorField {
    let shape = u.shape();
    let n = shape.len();
    let vals: Vec<[f64; 3]> = (0..n)
        .into_par_iter()
        .map(|i| {
            let c = shape.coords(i);
            let d = u.at(i);
            let s = u.sample_unchecked([c[0] as f64 + d[0], c[1] as f64 + d[1], c[2] as f64 + d[2]]);
            [d[0] + s[0], d[1] + s[1], d[2] + s[2]]
        })
        .collect();
    planes_from_vectors(shape, u.boundary(), &vals)
}

fn planes_from_vectors(shape: Shape, boundary: Boundary, vals: &[[f64; 3]]) -> VectorField {
    let n = shape.len();
    let mut data = vec![0.0; 3 * n];
    for (i, v) in vals.iter().enumerate() {
        data[i] = v[0];
        data[n + i] = v[1];
        data[2 * n + i] = v[2];
    }
    VectorField::from_raw_parts(shape, data, boundary)
}

/// Scaling-and-squaring states `u_0 .. u_K` plus the `K` actually used.
pub(crate) fn integrate_history(v: &VectorField, k: u32) -> (Vec<VectorField>, u32) {
    let k = squaring_steps_for(v, k);
    let mut states = Vec::with_capacity(k as usize + 1);
    states.push(v.scaled(1.0 / 2f64.powi(k as i32)));
    for _ in 0..k {
        let next = square(states.last().expect("non-empty"));
        states.push(next);
    }
    (states, k)
}

/// `exp(v)` by scaling and squaring. `k` is raised automatically until the
/// initial scaled field moves no voxel by more than half a voxel.
pub fn integrate_svf(v: &VectorField, k: u32) -> Result<DeformationField> {
    if v.data().iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("velocity field has non-finite values"));
    }
    let (mut states, k) = integrate_history(v, k);
    Ok(DeformationField { displacement: states.pop().expect("non-empty"), squaring_steps: k })
}

/// `outer ∘ inner`: `u(x) = u_inner(x) + u_outer(x + u_inner(x))`.
pub fn compose(outer: &DeformationField, inner: &DeformationField) -> Result<DeformationField> {
    if outer.shape() != inner.shape() {
        return Err(Error::ShapeMismatch { expected: inner.shape().0, actual: outer.shape().0 });
    }
    let shape = inner.shape();
    let ui = &inner.displacement;
    let uo = &outer.displacement;
    let vals: Vec<[f64; 3]> = (0..shape.len())
        .into_par_iter()
        .map(|i| {
            let c = shape.coords(i);
            let d = ui.at(i);
            let s = uo.sample_unchecked([c[0] as f64 + d[0], c[1] as f64 + d[1], c[2] as f64 + d[2]]);
            [d[0] + s[0], d[1] + s[1], d[2] + s[2]]
        })
        .collect();
    Ok(DeformationField {
        displacement: planes_from_vectors(shape, ui.boundary(), &vals),
        squaring_steps: inner.squaring_steps.max(outer.squaring_steps),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WarpMode {
    /// Trilinear, for intensities.
    #[default]
    Linear,
    /// Nearest voxel, for label maps.
    Nearest,
}

fn nearest_index(n: usize, p: f64, boundary: Boundary) -> usize {
    let r = p.round() as i64;
    match boundary {
        Boundary::Wrap => r.rem_euclid(n as i64) as usize,
        Boundary::Clamp => r.clamp(0, n as i64 - 1) as usize,
    }
}

/// `output(x) = image(x + u(x))`.
pub fn warp(image: &ScalarVolume, phi: &DeformationField, mode: WarpMode) -> Result<ScalarVolume> {
    let shape = image.shape();
    if phi.shape() != shape {
        return Err(Error::ShapeMismatch { expected: shape.0, actual: phi.shape().0 });
    }
    let u = &phi.displacement;
    let data: Vec<f64> = (0..shape.len())
        .into_par_iter()
        .map(|i| {
            let c = shape.coords(i);
            let d = u.at(i);
            let p = [c[0] as f64 + d[0], c[1] as f64 + d[1], c[2] as f64 + d[2]];
            match mode {
                WarpMode::Linear => image.sample_unchecked(p),
                WarpMode::Nearest => {
                    let b = image.boundary();
                    image.get(
                        nearest_index(shape.0[0], p[0], b),
                        nearest_index(shape.0[1], p[1], b),
                        nearest_index(shape.0[2], p[2], b),
                    )
                }
            }
        })
        .collect();
    ScalarVolume::new(shape, data, image.boundary())
}

/// `det(I + du/dx)` with central differences (one-sided at clamped faces).
pub fn jacobian_determinant(phi: &DeformationField) -> Result<ScalarVolume> {
    let shape = phi.shape();
    if shape.min_dim() < 3 {
        return Err(Error::invalid(format!("Jacobian needs every axis >= 3, got {shape}")));
    }
    let u = &phi.displacement;
    let b = u.boundary();
    let data: Vec<f64> = (0..shape.len())
        .into_par_iter()
        .map(|i| {
            let c = shape.coords(i);
            let mut j = [[0.0; 3]; 3];
            for (r, row) in j.iter_mut().enumerate() {
                for (a, entry) in row.iter_mut().enumerate() {
                    *entry = plane_derivative(u.component(r), shape, b, c, a) + if r == a { 1.0 } else { 0.0 };
                }
            }
            det3(&j)
        })
        .collect();
    ScalarVolume::new(shape, data, b)
}

#[inline]
fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetJacStats {
    pub mean: f64,
    pub std: f64,
    /// Fraction (not percent) of interior voxels with a negative determinant.
    pub negative_fraction: f64,
    /// True when the statistics describe one frame of a sequence.
    pub per_frame: bool,
}

/// Mean, population standard deviation and negative fraction. Clamped
/// volumes exclude the one-voxel boundary shell, where the determinant uses
/// one-sided differences; periodic volumes count every voxel.
pub fn detjac_stats(dj: &ScalarVolume) -> Result<DetJacStats> {
    let shape = dj.shape();
    let periodic = dj.boundary() == Boundary::Wrap;
    let interior: Vec<f64> = (0..shape.len())
        .filter(|&i| periodic || shape.is_interior(shape.coords(i)))
        .map(|i| dj.data()[i])
        .collect();
    if interior.is_empty() {
        return Err(Error::invalid(format!("volume {shape} has no interior voxels")));
    }
    let n = interior.len() as f64;
    let mean = interior.iter().sum::<f64>() / n;
    let var = interior.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let neg = interior.iter().filter(|&&v| v < 0.0).count() as f64;
    Ok(DetJacStats { mean, std: var.sqrt(), negative_fraction: neg / n, per_frame: true })
}

/// One row of a DetJac report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetJacRow {
    pub model: String,
    pub frame: usize,
    pub stats: DetJacStats,
}

pub const DETJAC_CSV_HEADER: &str = "model,frame,mean,std,neg_fraction";

pub fn detjac_report_csv(rows: &[DetJacRow]) -> String {
    let mut out = String::from(DETJAC_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.9},{:.9},{:.9e}\n",
            r.model, r.frame, r.stats.mean, r.stats.std, r.stats.negative_fraction
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_velocity_gives_exact_identity() {
        for k in [0, 1, 7, 12] {
            let phi = integrate_svf(&VectorField::zeros(Shape::cube(5), Boundary::Wrap), k).unwrap();
            assert!(phi.is_identity());
            let dj = jacobian_determinant(&phi).unwrap();
            assert!(dj.data().iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn constant_velocity_is_translation() {
        let c = [1.25, -0.75, 3.0];
        let phi = integrate_svf(&VectorField::constant(Shape::cube(6), c, Boundary::Wrap), 7).unwrap();
        for i in 0..phi.shape().len() {
            assert_eq!(phi.displacement.at(i), c);
        }
    }

    #[test]
    fn k_is_raised_for_large_fields() {
        let v = VectorField::constant(Shape::cube(4), [100.0, 0.0, 0.0], Boundary::Wrap);
        assert_eq!(squaring_steps_for(&v, 7), 8);
        assert_eq!(integrate_svf(&v, 7).unwrap().squaring_steps, 8);
        let small = VectorField::constant(Shape::cube(4), [1.0, 0.0, 0.0], Boundary::Wrap);
        assert_eq!(squaring_steps_for(&small, 0), 1);
    }

    #[test]
    fn non_finite_velocity_rejected() {
        let mut data = vec![0.0; 81];
        data[5] = f64::NAN;
        // construction already refuses non-finite fields
        assert!(VectorField::new(Shape::cube(3), data, Boundary::Wrap).is_err());
    }

    #[test]
    fn compose_with_identity_is_bit_identical() {
        let v = VectorField::from_fn(Shape::cube(6), Boundary::Clamp, |c| {
            [0.3 * (c[0] as f64).sin(), 0.2 * (c[1] as f64).cos(), 0.1 * c[2] as f64]
        })
        .unwrap();
        let phi = integrate_svf(&v, 7).unwrap();
        let id = DeformationField::identity(phi.shape(), Boundary::Clamp);
        assert_eq!(compose(&phi, &id).unwrap().displacement, phi.displacement);
        assert_eq!(compose(&id, &phi).unwrap().displacement, phi.displacement);
    }

    #[test]
    fn translations_compose_additively() {
        let s = Shape::cube(5);
        let c1 = [0.5, 1.25, -2.0];
        let c2 = [1.5, -0.25, 0.75];
        let t1 = integrate_svf(&VectorField::constant(s, c1, Boundary::Wrap), 7).unwrap();
        let t2 = integrate_svf(&VectorField::constant(s, c2, Boundary::Wrap), 7).unwrap();
        let sum = [c1[0] + c2[0], c1[1] + c2[1], c1[2] + c2[2]];
        let t12 = integrate_svf(&VectorField::constant(s, sum, Boundary::Wrap), 7).unwrap();
        assert_eq!(compose(&t1, &t2).unwrap().displacement, t12.displacement);
    }

    #[test]
    fn compose_shape_mismatch() {
        let a = DeformationField::identity(Shape::cube(3), Boundary::Wrap);
        let b = DeformationField::identity(Shape::cube(4), Boundary::Wrap);
        assert!(matches!(compose(&a, &b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn warp_identity_and_integer_shift() {
        let s = Shape::new(4, 5, 6);
        let img = ScalarVolume::from_fn(s, Boundary::Wrap, |c| (c[0] * 31 + c[1] * 7 + c[2]) as f64).unwrap();
        let id = DeformationField::identity(s, Boundary::Wrap);
        assert_eq!(warp(&img, &id, WarpMode::Linear).unwrap(), img);
        let shift = DeformationField::from_displacement(VectorField::constant(s, [1.0, -2.0, 3.0], Boundary::Wrap));
        for mode in [WarpMode::Linear, WarpMode::Nearest] {
            let out = warp(&img, &shift, mode).unwrap();
            for i in 0..s.len() {
                let c = s.coords(i);
                let src = img.get((c[0] + 1) % 4, (c[1] + 3) % 5, (c[2] + 3) % 6);
                assert_eq!(out.data()[i], src);
            }
        }
    }

    #[test]
    fn nearest_warp_keeps_label_set() {
        let s = Shape::cube(8);
        let labels = ScalarVolume::from_fn(s, Boundary::Clamp, |c| ((c[0] + c[1] + c[2]) % 3) as f64).unwrap();
        let v = VectorField::from_fn(s, Boundary::Clamp, |c| [0.37 * (c[1] as f64 * 0.5).sin(), 0.21, -0.4])
            .unwrap();
        let out = warp(&labels, &integrate_svf(&v, 7).unwrap(), WarpMode::Nearest).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0 || v == 1.0 || v == 2.0));
    }

    #[test]
    fn uniform_dilation_determinant() {
        let s = Shape::cube(7);
        let eps = 0.1;
        let u = VectorField::from_fn(s, Boundary::Clamp, |c| {
            [eps * (c[0] as f64 - 3.0), eps * (c[1] as f64 - 3.0), eps * (c[2] as f64 - 3.0)]
        })
        .unwrap();
        let dj = jacobian_determinant(&DeformationField::from_displacement(u)).unwrap();
        for i in 0..s.len() {
            if s.is_interior(s.coords(i)) {
                assert!((dj.data()[i] - 1.331).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn stats_of_identity() {
        let dj = jacobian_determinant(&DeformationField::identity(Shape::cube(5), Boundary::Clamp)).unwrap();
        let st = detjac_stats(&dj).unwrap();
        assert_eq!((st.mean, st.std, st.negative_fraction), (1.0, 0.0, 0.0));
    }

    #[test]
    fn stats_count_one_negative_voxel() {
        let s = Shape::cube(6);
        let mut data = vec![1.0; s.len()];
        data[s.index(2, 3, 2)] = -0.5;
        // boundary negatives are ignored
        data[s.index(0, 0, 0)] = -3.0;
        let st = detjac_stats(&ScalarVolume::new(s, data, Boundary::Clamp).unwrap()).unwrap();
        assert_eq!(st.negative_fraction, 1.0 / 64.0);
    }

    #[test]
    fn periodic_stats_count_every_voxel() {
        let s = Shape::cube(6);
        let mut data = vec![1.0; s.len()];
        data[s.index(0, 0, 0)] = -3.0;
        let st = detjac_stats(&ScalarVolume::new(s, data, Boundary::Wrap).unwrap()).unwrap();
        assert_eq!(st.negative_fraction, 1.0 / 216.0);
    }

    #[test]
    fn periodic_flow_preserves_total_volume() {
        // det(I + Du) - 1 integrates to zero over the torus.
        let v = crate::synthdata::smooth_random_field(Shape::cube(16), Boundary::Wrap, 2.0, 1.5, 4);
        let st = detjac_stats(&jacobian_determinant(&integrate_svf(&v, 7).unwrap()).unwrap()).unwrap();
        assert!(st.std > 0.05, "{st:?}");
        assert!((st.mean - 1.0).abs() < 5e-3, "{st:?}");
    }

    #[test]
    fn report_rows() {
        let st = DetJacStats { mean: 1.0, std: 0.0, negative_fraction: 0.0, per_frame: true };
        let csv = detjac_report_csv(&[DetJacRow { model: "ldt-mini".into(), frame: 1, stats: st }]);
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], DETJAC_CSV_HEADER);
        assert!(lines[1].starts_with("ldt-mini,1,1.000000000,0.000000000,"));
    }
}
