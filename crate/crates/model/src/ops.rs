//! Fused elementwise and row kernels with analytic gradients.
//!
//! `f32` paths use a polynomial `exp` accurate to a few ulp; `f64` paths
//! use the standard library so finite-difference checks stay sharp.

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor, D};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const CUBIC: f64 = 0.044_715;

/// `e^x` for `f32` via `2^n · 2^f` with a degree-6 polynomial on
/// `f ∈ [-0.5, 0.5]`; branch-free so loops vectorize. Inputs are clamped
/// to `[-80, 88]`, which keeps results normal.
#[inline(always)]
fn exp_f32(x: f32) -> f32 {
    const SHIFT: f32 = 12_582_912.0;
    let x = if x < -80.0 {
        -80.0
    } else if x > 88.0 {
        88.0
    } else {
        x
    };
    let t = x * std::f32::consts::LOG2_E;
    // Adding 1.5·2²³ rounds to an integer held in the low mantissa bits.
    let s = t + SHIFT;
    let n = s - SHIFT;
    let f = (t - n) * std::f32::consts::LN_2;
    let p = 1.0
        + f * (1.0 + f * (0.5 + f * (0.166_666_67 + f * (0.041_666_668 + f * (0.008_333_334 + f * 0.001_388_889)))));
    let bits = s.to_bits().wrapping_sub(SHIFT.to_bits()).wrapping_add(127) << 23;
    p * f32::from_bits(bits)
}

#[inline(always)]
fn tanh_f32(u: f32) -> f32 {
    1.0 - 2.0 / (exp_f32(2.0 * u) + 1.0)
}

#[inline(always)]
fn tanh_f64(u: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

#[inline(always)]
fn gelu_f64(x: f64) -> f64 {
    0.5 * x * (1.0 + tanh_f64(SQRT_2_OVER_PI * (x + CUBIC * x * x * x)))
}

#[inline(always)]
fn gelu_slope_f64(x: f64) -> f64 {
    let t = tanh_f64(SQRT_2_OVER_PI * (x + CUBIC * x * x * x));
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * CUBIC * x * x)
}

#[inline(always)]
fn gelu_f32(x: f32) -> f32 {
    0.5 * x * (1.0 + tanh_f32(0.797_884_6 * (x + 0.044_715 * x * x * x)))
}

#[inline(always)]
fn gelu_slope_f32(x: f32) -> f32 {
    let t = tanh_f32(0.797_884_6 * (x + 0.044_715 * x * x * x));
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * 0.797_884_6 * (1.0 + 0.134_145 * x * x)
}

fn contiguous_range(name: &str, layout: &Layout) -> candle_core::Result<(usize, usize)> {
    layout.contiguous_offsets().ok_or_else(|| candle_core::Error::Msg(format!("{name} expects a contiguous input")))
}

fn unsupported(name: &str) -> candle_core::Error {
    candle_core::Error::Msg(format!("{name} supports f32 and f64 only"))
}

fn map_storage(
    name: &str,
    storage: &CpuStorage,
    layout: &Layout,
    f32_fn: impl Fn(f32) -> f32,
    f64_fn: impl Fn(f64) -> f64,
) -> candle_core::Result<(CpuStorage, Shape)> {
    let (start, end) = contiguous_range(name, layout)?;
    let out = match storage {
        CpuStorage::F32(v) => CpuStorage::F32(v[start..end].iter().map(|&x| f32_fn(x)).collect()),
        CpuStorage::F64(v) => CpuStorage::F64(v[start..end].iter().map(|&x| f64_fn(x)).collect()),
        _ => return Err(unsupported(name)),
    };
    Ok((out, layout.shape().clone()))
}

/// Applies `f` to every row of the last axis.
fn map_rows<T: Copy>(data: &[T], row: usize, mut f: impl FnMut(&[T], &mut [T])) -> Vec<T> {
    let mut out = data.to_vec();
    for (src, dst) in data.chunks_exact(row).zip(out.chunks_exact_mut(row)) {
        f(src, dst);
    }
    out
}

fn last_dim(layout: &Layout) -> candle_core::Result<usize> {
    layout.shape().dims().last().copied().filter(|&n| n > 0).ok_or_else(|| candle_core::Error::Msg("row op on an empty axis".into()))
}

struct Gelu;
struct GeluSlope;
struct Softmax;
struct LayerNorm {
    eps: f64,
}

impl CustomOp1 for Gelu {
    fn name(&self) -> &'static str {
        "fused-gelu"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        map_storage(self.name(), storage, layout, gelu_f32, gelu_f64)
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let slope = arg.contiguous()?.apply_op1_no_bwd(&GeluSlope)?;
        Ok(Some(grad_res.mul(&slope)?))
    }
}

impl CustomOp1 for GeluSlope {
    fn name(&self) -> &'static str {
        "fused-gelu-slope"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        map_storage(self.name(), storage, layout, gelu_slope_f32, gelu_slope_f64)
    }
}

impl CustomOp1 for Softmax {
    fn name(&self) -> &'static str {
        "fused-softmax"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (start, end) = contiguous_range(self.name(), layout)?;
        let n = last_dim(layout)?;
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(map_rows(&v[start..end], n, |src, dst| {
                let max = src.iter().fold(f32::NEG_INFINITY, |m, &x| if x > m { x } else { m });
                dst.iter_mut().for_each(|d| *d = exp_f32(*d - max));
                let inv = 1.0 / dst.iter().sum::<f32>();
                dst.iter_mut().for_each(|d| *d *= inv);
            })),
            CpuStorage::F64(v) => CpuStorage::F64(map_rows(&v[start..end], n, |src, dst| {
                let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = (s - max).exp();
                    sum += *d;
                }
                dst.iter_mut().for_each(|d| *d /= sum);
            })),
            _ => return Err(unsupported(self.name())),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let dot = (grad_res * res)?.sum_keepdim(D::Minus1)?;
        Ok(Some((grad_res.broadcast_sub(&dot)? * res)?))
    }
}

impl CustomOp1 for LayerNorm {
    fn name(&self) -> &'static str {
        "fused-layer-norm"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (start, end) = contiguous_range(self.name(), layout)?;
        let n = last_dim(layout)?;
        let out = match storage {
            CpuStorage::F32(v) => {
                let eps = self.eps as f32;
                CpuStorage::F32(map_rows(&v[start..end], n, |src, dst| {
                    let mean = src.iter().sum::<f32>() / n as f32;
                    let var = src.iter().map(|x| (x - mean) * (x - mean)).sum::<f32>() / n as f32;
                    let r = 1.0 / (var + eps).sqrt();
                    dst.iter_mut().zip(src).for_each(|(d, x)| *d = (x - mean) * r);
                }))
            }
            CpuStorage::F64(v) => CpuStorage::F64(map_rows(&v[start..end], n, |src, dst| {
                let mean = src.iter().sum::<f64>() / n as f64;
                let var = src.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
                let r = 1.0 / (var + self.eps).sqrt();
                dst.iter_mut().zip(src).for_each(|(d, x)| *d = (x - mean) * r);
            })),
            _ => return Err(unsupported(self.name())),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let mean = arg.mean_keepdim(D::Minus1)?;
        let var = arg.broadcast_sub(&mean)?.sqr()?.mean_keepdim(D::Minus1)?;
        let rstd = (var + self.eps)?.sqrt()?.recip()?;
        let g_mean = grad_res.mean_keepdim(D::Minus1)?;
        let gx_mean = (grad_res * res)?.mean_keepdim(D::Minus1)?;
        let inner = grad_res.broadcast_sub(&g_mean)?.sub(&res.broadcast_mul(&gx_mean)?)?;
        Ok(Some(inner.broadcast_mul(&rstd)?))
    }
}

/// Tanh-approximated GELU.
pub fn gelu(x: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(Gelu)
}

/// Softmax over the last axis.
pub fn softmax_last(x: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(Softmax)
}

/// Normalization over the last axis without affine parameters.
pub fn layer_norm(x: &Tensor, eps: f64) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(LayerNorm { eps })
}
