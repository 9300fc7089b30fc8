//! Voxel grids: scalar volumes, 3-component vector fields and the
//! interpolation, differentiation and resampling operators shared by the
//! rest of the crate.
//!
//! Coordinates are in voxel units with the origin at voxel `(0, 0, 0)`.
//! Voxels are stored in `h`-major order: linear index `(h * W + w) * L + l`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape(pub [usize; 3]);

impl Shape {
    pub const fn new(h: usize, w: usize, l: usize) -> Self {
        Shape([h, w, l])
    }

    pub const fn cube(n: usize) -> Self {
        Shape([n, n, n])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0[0] * self.0[1] * self.0[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, h: usize, w: usize, l: usize) -> usize {
        (h * self.0[1] + w) * self.0[2] + l
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let l = idx % self.0[2];
        let hw = idx / self.0[2];
        [hw / self.0[1], hw % self.0[1], l]
    }

    pub fn min_dim(&self) -> usize {
        self.0.iter().copied().min().unwrap_or(0)
    }

    fn validate(&self) -> Result<()> {
        if self.0.iter().any(|&n| n == 0) {
            return Err(Error::invalid(format!("shape {:?} has a zero axis", self.0)));
        }
        Ok(())
    }

    /// True for voxels at least one step away from every face.
    #[inline]
    pub fn is_interior(&self, c: [usize; 3]) -> bool {
        (0..3).all(|a| c[a] >= 1 && c[a] + 1 < self.0[a])
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.0[0], self.0[1], self.0[2])
    }
}

/// How coordinates outside the grid are mapped back onto it.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Boundary {
    /// Periodic (torus) domain.
    Wrap,
    /// Coordinates are clamped to the outermost voxel.
    #[default]
    Clamp,
}

impl std::str::FromStr for Boundary {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wrap" => Ok(Boundary::Wrap),
            "clamp" => Ok(Boundary::Clamp),
            other => Err(Error::invalid(format!("unknown boundary mode {other:?}"))),
        }
    }
}

/// Per-axis interpolation stencil: the two bracketing lattice indices, the
/// fractional weight of the upper one and `d(frac)/d(coordinate)`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct AxisStencil {
    pub i0: usize,
    pub i1: usize,
    pub t: f64,
    pub dt: f64,
}

#[inline]
pub(crate) fn axis_stencil(n: usize, p: f64, boundary: Boundary) -> AxisStencil {
    if n == 1 {
        return AxisStencil { i0: 0, i1: 0, t: 0.0, dt: 0.0 };
    }
    match boundary {
        Boundary::Wrap => {
            let f = p.floor();
            let i0 = (f as i64).rem_euclid(n as i64) as usize;
            AxisStencil { i0, i1: (i0 + 1) % n, t: p - f, dt: 1.0 }
        }
        Boundary::Clamp => {
            let top = (n - 1) as f64;
            let inside = p > 0.0 && p < top;
            let pc = p.clamp(0.0, top);
            let f = pc.floor();
            let i0 = f as usize;
            if i0 >= n - 1 {
                AxisStencil { i0: n - 1, i1: n - 1, t: 0.0, dt: 0.0 }
            } else {
                AxisStencil {
                    i0,
                    i1: i0 + 1,
                    t: pc - f,
                    dt: if inside { 1.0 } else { 0.0 },
                }
            }
        }
    }
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

/// Trilinear sample of one plane. Nested lerps keep constants exact.
#[inline]
pub(crate) fn sample_plane(data: &[f64], shape: Shape, s: &[AxisStencil; 3]) -> f64 {
    let [_, w, l] = shape.0;
    let at = |h: usize, ww: usize, ll: usize| data[(h * w + ww) * l + ll];
    let c00 = lerp(at(s[0].i0, s[1].i0, s[2].i0), at(s[0].i0, s[1].i0, s[2].i1), s[2].t);
    let c01 = lerp(at(s[0].i0, s[1].i1, s[2].i0), at(s[0].i0, s[1].i1, s[2].i1), s[2].t);
    let c10 = lerp(at(s[0].i1, s[1].i0, s[2].i0), at(s[0].i1, s[1].i0, s[2].i1), s[2].t);
    let c11 = lerp(at(s[0].i1, s[1].i1, s[2].i0), at(s[0].i1, s[1].i1, s[2].i1), s[2].t);
    let c0 = lerp(c00, c01, s[1].t);
    let c1 = lerp(c10, c11, s[1].t);
    lerp(c0, c1, s[0].t)
}

/// Derivative of the trilinear interpolant with respect to the sample
/// position, exact within each cell.
#[inline]
pub(crate) fn sample_plane_grad(data: &[f64], shape: Shape, s: &[AxisStencil; 3]) -> [f64; 3] {
    let [_, w, l] = shape.0;
    let at = |h: usize, ww: usize, ll: usize| data[(h * w + ww) * l + ll];
    let mut v = [[[0.0; 2]; 2]; 2];
    for (a, ia) in [s[0].i0, s[0].i1].into_iter().enumerate() {
        for (b, ib) in [s[1].i0, s[1].i1].into_iter().enumerate() {
            for (c, ic) in [s[2].i0, s[2].i1].into_iter().enumerate() {
                v[a][b][c] = at(ia, ib, ic);
            }
        }
    }
    let (th, tw, tl) = (s[0].t, s[1].t, s[2].t);
    let wt = |t: f64, k: usize| if k == 0 { 1.0 - t } else { t };
    let mut g = [0.0; 3];
    for a in 0..2 {
        for b in 0..2 {
            for c in 0..2 {
                let val = v[a][b][c];
                let sa = if a == 0 { -1.0 } else { 1.0 };
                let sb = if b == 0 { -1.0 } else { 1.0 };
                let sc = if c == 0 { -1.0 } else { 1.0 };
                g[0] += val * sa * wt(tw, b) * wt(tl, c);
                g[1] += val * wt(th, a) * sb * wt(tl, c);
                g[2] += val * wt(th, a) * wt(tw, b) * sc;
            }
        }
    }
    [g[0] * s[0].dt, g[1] * s[1].dt, g[2] * s[2].dt]
}

/// Scatter `value` into the eight corners of a stencil with trilinear
/// weights; the transpose of [`sample_plane`].
#[inline]
pub(crate) fn scatter_plane(out: &mut [f64], shape: Shape, s: &[AxisStencil; 3], value: f64) {
    let [_, w, l] = shape.0;
    let wt = |t: f64, k: usize| if k == 0 { 1.0 - t } else { t };
    for (a, ia) in [s[0].i0, s[0].i1].into_iter().enumerate() {
        let wa = wt(s[0].t, a);
        for (b, ib) in [s[1].i0, s[1].i1].into_iter().enumerate() {
            let wb = wa * wt(s[1].t, b);
            for (c, ic) in [s[2].i0, s[2].i1].into_iter().enumerate() {
                out[(ia * w + ib) * l + ic] += value * wb * wt(s[2].t, c);
            }
        }
    }
}

#[inline]
pub(crate) fn stencils(shape: Shape, p: [f64; 3], boundary: Boundary) -> [AxisStencil; 3] {
    [
        axis_stencil(shape.0[0], p[0], boundary),
        axis_stencil(shape.0[1], p[1], boundary),
        axis_stencil(shape.0[2], p[2], boundary),
    ]
}

/// Central-difference stencil along one axis at index `i`: returns
/// `(minus, plus, scale)` so the derivative is `scale * (v[plus] - v[minus])`.
/// Clamped edges fall back to one-sided differences.
#[inline]
pub(crate) fn diff_stencil(n: usize, i: usize, boundary: Boundary) -> (usize, usize, f64) {
    if i > 0 && i + 1 < n {
        return (i - 1, i + 1, 0.5);
    }
    match boundary {
        Boundary::Wrap => ((i + n - 1) % n, (i + 1) % n, 0.5),
        Boundary::Clamp => {
            if i == 0 {
                (0, 1, 1.0)
            } else {
                (n - 2, n - 1, 1.0)
            }
        }
    }
}

/// Derivative of one plane along `axis` at voxel `c`.
#[inline]
pub(crate) fn plane_derivative(data: &[f64], shape: Shape, boundary: Boundary, c: [usize; 3], axis: usize) -> f64 {
    let (m, p, scale) = diff_stencil(shape.0[axis], c[axis], boundary);
    let mut cm = c;
    let mut cp = c;
    cm[axis] = m;
    cp[axis] = p;
    scale * (data[shape.index(cp[0], cp[1], cp[2])] - data[shape.index(cm[0], cm[1], cm[2])])
}

fn check_finite(data: &[f64], what: &str) -> Result<()> {
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("{what} has a non-finite value at index {i}")));
    }
    Ok(())
}

fn check_coords(p: [f64; 3]) -> Result<()> {
    if p.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::invalid(format!("non-finite sample coordinate {p:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalarVolume {
    shape: Shape,
    data: Vec<f64>,
    boundary: Boundary,
}

impl ScalarVolume {
    pub fn new(shape: Shape, data: Vec<f64>, boundary: Boundary) -> Result<Self> {
        shape.validate()?;
        if data.len() != shape.len() {
            return Err(Error::invalid(format!(
                "volume {shape} needs {} values, got {}",
                shape.len(),
                data.len()
            )));
        }
        check_finite(&data, "volume")?;
        Ok(ScalarVolume { shape, data, boundary })
    }

    pub fn zeros(shape: Shape, boundary: Boundary) -> Self {
        ScalarVolume { shape, data: vec![0.0; shape.len()], boundary }
    }

    pub fn constant(shape: Shape, value: f64, boundary: Boundary) -> Self {
        ScalarVolume { shape, data: vec![value; shape.len()], boundary }
    }

    pub fn from_fn(shape: Shape, boundary: Boundary, f: impl Fn([usize; 3]) -> f64) -> Result<Self> {
        let data = (0..shape.len()).map(|i| f(shape.coords(i))).collect();
        Self::new(shape, data, boundary)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn boundary(&self) -> Boundary {
        self.boundary
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, h: usize, w: usize, l: usize) -> f64 {
        self.data[self.shape.index(h, w, l)]
    }

    /// Trilinear sample at a voxel-unit coordinate.
    pub fn sample(&self, p: [f64; 3]) -> Result<f64> {
        check_coords(p)?;
        Ok(self.sample_unchecked(p))
    }

    #[inline]
    pub(crate) fn sample_unchecked(&self, p: [f64; 3]) -> f64 {
        sample_plane(&self.data, self.shape, &stencils(self.shape, p, self.boundary))
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Result<Self> {
        Self::new(self.shape, self.data.iter().map(|&v| f(v)).collect(), self.boundary)
    }

    /// Separable Gaussian blur with the volume's boundary rule.
    pub fn gaussian_smoothed(&self, sigma: f64) -> Self {
        let mut data = self.data.clone();
        gaussian_smooth_plane(&mut data, self.shape, self.boundary, sigma);
        ScalarVolume { shape: self.shape, data, boundary: self.boundary }
    }
}

/// A 3-component field (velocity or displacement, voxel units), stored
/// component-major: all `h` components, then all `w`, then all `l`.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorField {
    shape: Shape,
    data: Vec<f64>,
    boundary: Boundary,
}

impl VectorField {
    pub const CHANNELS: usize = 3;

    pub fn new(shape: Shape, data: Vec<f64>, boundary: Boundary) -> Result<Self> {
        shape.validate()?;
        if data.len() != 3 * shape.len() {
            return Err(Error::invalid(format!(
                "vector field {shape} needs {} values, got {}",
                3 * shape.len(),
                data.len()
            )));
        }
        check_finite(&data, "vector field")?;
        Ok(VectorField { shape, data, boundary })
    }

    pub fn zeros(shape: Shape, boundary: Boundary) -> Self {
        VectorField { shape, data: vec![0.0; 3 * shape.len()], boundary }
    }

    pub fn constant(shape: Shape, value: [f64; 3], boundary: Boundary) -> Self {
        let n = shape.len();
        let mut data = Vec::with_capacity(3 * n);
        for v in value {
            data.extend(std::iter::repeat_n(v, n));
        }
        VectorField { shape, data, boundary }
    }

    pub fn from_fn(shape: Shape, boundary: Boundary, f: impl Fn([usize; 3]) -> [f64; 3]) -> Result<Self> {
        let n = shape.len();
        let mut data = vec![0.0; 3 * n];
        for i in 0..n {
            let v = f(shape.coords(i));
            for c in 0..3 {
                data[c * n + i] = v[c];
            }
        }
        Self::new(shape, data, boundary)
    }

    pub fn from_components(components: [ScalarVolume; 3]) -> Result<Self> {
        let shape = components[0].shape();
        let boundary = components[0].boundary();
        let mut data = Vec::with_capacity(3 * shape.len());
        for c in &components {
            if c.shape() != shape {
                return Err(Error::ShapeMismatch { expected: shape.0, actual: c.shape().0 });
            }
            data.extend_from_slice(c.data());
        }
        Ok(VectorField { shape, data, boundary })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn boundary(&self) -> Boundary {
        self.boundary
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn component(&self, c: usize) -> &[f64] {
        let n = self.shape.len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn component_volume(&self, c: usize) -> ScalarVolume {
        ScalarVolume { shape: self.shape, data: self.component(c).to_vec(), boundary: self.boundary }
    }

    #[inline]
    pub fn at(&self, idx: usize) -> [f64; 3] {
        let n = self.shape.len();
        [self.data[idx], self.data[n + idx], self.data[2 * n + idx]]
    }

    pub fn sample(&self, p: [f64; 3]) -> Result<[f64; 3]> {
        check_coords(p)?;
        Ok(self.sample_unchecked(p))
    }

    #[inline]
    pub(crate) fn sample_unchecked(&self, p: [f64; 3]) -> [f64; 3] {
        let s = stencils(self.shape, p, self.boundary);
        let n = self.shape.len();
        [
            sample_plane(&self.data[..n], self.shape, &s),
            sample_plane(&self.data[n..2 * n], self.shape, &s),
            sample_plane(&self.data[2 * n..], self.shape, &s),
        ]
    }

    /// Largest per-voxel Euclidean norm.
    pub fn max_norm(&self) -> f64 {
        (0..self.shape.len())
            .map(|i| {
                let v = self.at(i);
                (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
            })
            .fold(0.0, f64::max)
    }

    pub fn mean_norm(&self) -> f64 {
        let n = self.shape.len();
        (0..n)
            .map(|i| {
                let v = self.at(i);
                (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
            })
            .sum::<f64>()
            / n as f64
    }

    pub fn scaled(&self, factor: f64) -> Self {
        VectorField {
            shape: self.shape,
            data: self.data.iter().map(|v| v * factor).collect(),
            boundary: self.boundary,
        }
    }

    pub fn negated(&self) -> Self {
        self.scaled(-1.0)
    }

    pub fn add(&self, other: &VectorField) -> Result<Self> {
        if other.shape != self.shape {
            return Err(Error::ShapeMismatch { expected: self.shape.0, actual: other.shape.0 });
        }
        Ok(VectorField {
            shape: self.shape,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
            boundary: self.boundary,
        })
    }

    pub fn gaussian_smoothed(&self, sigma: f64) -> Self {
        let n = self.shape.len();
        let mut data = self.data.clone();
        for c in 0..3 {
            gaussian_smooth_plane(&mut data[c * n..(c + 1) * n], self.shape, self.boundary, sigma);
        }
        VectorField { shape: self.shape, data, boundary: self.boundary }
    }

    /// Central-difference divergence (same stencil as [`spatial_gradient`]).
    pub fn divergence(&self) -> ScalarVolume {
        let n = self.shape.len();
        let data = (0..n)
            .map(|i| {
                let c = self.shape.coords(i);
                (0..3)
                    .map(|a| plane_derivative(self.component(a), self.shape, self.boundary, c, a))
                    .sum()
            })
            .collect();
        ScalarVolume { shape: self.shape, data, boundary: self.boundary }
    }

    pub(crate) fn from_raw_parts(shape: Shape, data: Vec<f64>, boundary: Boundary) -> Self {
        debug_assert_eq!(data.len(), 3 * shape.len());
        VectorField { shape, data, boundary }
    }
}

/// Anything that can be trilinearly sampled.
pub trait Interpolate {
    type Output;
    fn interpolate(&self, p: [f64; 3]) -> Result<Self::Output>;
}

impl Interpolate for ScalarVolume {
    type Output = f64;
    fn interpolate(&self, p: [f64; 3]) -> Result<f64> {
        self.sample(p)
    }
}

impl Interpolate for VectorField {
    type Output = [f64; 3];
    fn interpolate(&self, p: [f64; 3]) -> Result<[f64; 3]> {
        self.sample(p)
    }
}

/// Trilinear blend of the eight voxels around `p`; out-of-range coordinates
/// are wrapped or clamped according to the container's boundary mode.
pub fn trilinear_sample<V: Interpolate>(vol: &V, p: [f64; 3]) -> Result<V::Output> {
    vol.interpolate(p)
}

/// Central differences in the interior; one-sided at clamped faces and
/// periodic at wrapped ones. Units: intensity per voxel.
pub fn spatial_gradient(vol: &ScalarVolume) -> Result<VectorField> {
    let shape = vol.shape();
    if shape.min_dim() < 3 {
        return Err(Error::invalid(format!("spatial gradient needs every axis >= 3, got {shape}")));
    }
    let n = shape.len();
    let mut data = vec![0.0; 3 * n];
    for i in 0..n {
        let c = shape.coords(i);
        for a in 0..3 {
            data[a * n + i] = plane_derivative(vol.data(), shape, vol.boundary(), c, a);
        }
    }
    Ok(VectorField::from_raw_parts(shape, data, vol.boundary()))
}

/// Source coordinate (cell-centred mapping) of output index `i` along an axis.
#[inline]
fn resample_coord(i: usize, from: usize, to: usize) -> f64 {
    (i as f64 + 0.5) * from as f64 / to as f64 - 0.5
}

fn resample_plane(src: &[f64], from: Shape, to: Shape, boundary: Boundary) -> Vec<f64> {
    (0..to.len())
        .map(|i| {
            let c = to.coords(i);
            let p = [
                resample_coord(c[0], from.0[0], to.0[0]),
                resample_coord(c[1], from.0[1], to.0[1]),
                resample_coord(c[2], from.0[2], to.0[2]),
            ];
            sample_plane(src, from, &stencils(from, p, boundary))
        })
        .collect()
}

/// Resampling onto a new grid shape.
pub trait Resample: Sized {
    fn resample(&self, new_shape: Shape) -> Result<Self>;
}

impl Resample for ScalarVolume {
    fn resample(&self, new_shape: Shape) -> Result<Self> {
        new_shape.validate()?;
        if new_shape == self.shape {
            return Ok(self.clone());
        }
        let data = resample_plane(&self.data, self.shape, new_shape, self.boundary);
        Ok(ScalarVolume { shape: new_shape, data, boundary: self.boundary })
    }
}

impl Resample for VectorField {
    /// Components are rescaled by the per-axis shape ratio so that
    /// voxel-unit displacements keep their physical meaning.
    fn resample(&self, new_shape: Shape) -> Result<Self> {
        new_shape.validate()?;
        if new_shape == self.shape {
            return Ok(self.clone());
        }
        let mut data = Vec::with_capacity(3 * new_shape.len());
        for c in 0..3 {
            let ratio = new_shape.0[c] as f64 / self.shape.0[c] as f64;
            let plane = resample_plane(self.component(c), self.shape, new_shape, self.boundary);
            data.extend(plane.into_iter().map(|v| v * ratio));
        }
        Ok(VectorField { shape: new_shape, data, boundary: self.boundary })
    }
}

/// Trilinear resampling of a field or volume to `new_shape`.
pub fn resample<R: Resample>(field: &R, new_shape: Shape) -> Result<R> {
    field.resample(new_shape)
}

/// Transpose of [`Resample::resample`] for vector fields: maps a gradient
/// with respect to the resampled field back onto the source grid.
pub(crate) fn resample_field_transpose(grad: &VectorField, source: Shape) -> VectorField {
    let to = grad.shape();
    if to == source {
        return grad.clone();
    }
    let (n_src, n_dst) = (source.len(), to.len());
    let mut out = vec![0.0; 3 * n_src];
    for c in 0..3 {
        let ratio = to.0[c] as f64 / source.0[c] as f64;
        let g = grad.component(c);
        let dst = &mut out[c * n_src..(c + 1) * n_src];
        for (i, &gv) in g.iter().enumerate().take(n_dst) {
            let cc = to.coords(i);
            let p = [
                resample_coord(cc[0], source.0[0], to.0[0]),
                resample_coord(cc[1], source.0[1], to.0[1]),
                resample_coord(cc[2], source.0[2], to.0[2]),
            ];
            scatter_plane(dst, source, &stencils(source, p, grad.boundary()), gv * ratio);
        }
    }
    VectorField::from_raw_parts(source, out, grad.boundary())
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

pub(crate) fn gaussian_smooth_plane(data: &mut [f64], shape: Shape, boundary: Boundary, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as i64;
    let mut tmp = vec![0.0; data.len()];
    for axis in 0..3 {
        let n = shape.0[axis] as i64;
        for (i, out) in tmp.iter_mut().enumerate() {
            let c = shape.coords(i);
            let mut acc = 0.0;
            for (k, &kw) in kernel.iter().enumerate() {
                let j = c[axis] as i64 + k as i64 - radius;
                let j = match boundary {
                    Boundary::Wrap => j.rem_euclid(n),
                    Boundary::Clamp => j.clamp(0, n - 1),
                } as usize;
                let mut cj = c;
                cj[axis] = j;
                acc += kw * data[shape.index(cj[0], cj[1], cj[2])];
            }
            *out = acc;
        }
        data.copy_from_slice(&tmp);
    }
}

/// Ordered stack of velocity frames with their acquisition ages.
#[derive(Clone, Debug, PartialEq)]
pub struct VelocitySequence {
    frames: Vec<VectorField>,
    ages: Vec<f64>,
}

impl VelocitySequence {
    pub fn new(frames: Vec<VectorField>, ages: Vec<f64>) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::invalid("velocity sequence needs at least one frame"));
        }
        if frames.len() != ages.len() {
            return Err(Error::invalid(format!(
                "{} frames but {} ages",
                frames.len(),
                ages.len()
            )));
        }
        if ages.windows(2).any(|w| w[1] <= w[0]) || ages.iter().any(|a| !a.is_finite()) {
            return Err(Error::invalid(format!("ages must be finite and strictly increasing: {ages:?}")));
        }
        let shape = frames[0].shape();
        if let Some(f) = frames.iter().find(|f| f.shape() != shape) {
            return Err(Error::ShapeMismatch { expected: shape.0, actual: f.shape().0 });
        }
        Ok(VelocitySequence { frames, ages })
    }

    pub fn frames(&self) -> &[VectorField] {
        &self.frames
    }

    pub fn ages(&self) -> &[f64] {
        &self.ages
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn shape(&self) -> Shape {
        self.frames[0].shape()
    }
}
