//! Image-similarity and overlap metrics: PSNR, 3D SSIM and Dice.

use crate::error::{Error, Result};
use crate::volume::{ScalarVolume, Shape};

/// PSNR reported for (numerically) identical volumes.
pub const PSNR_CAP_DB: f64 = 99.0;

fn same_shape(a: &ScalarVolume, b: &ScalarVolume) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch { expected: a.shape().0, actual: b.shape().0 });
    }
    Ok(())
}

/// `max - min` of the reference volume, or 1 for a constant reference.
pub fn default_data_range(reference: &ScalarVolume) -> f64 {
    let (lo, hi) = reference.min_max();
    if hi > lo {
        hi - lo
    } else {
        1.0
    }
}

pub fn mse(a: &ScalarVolume, b: &ScalarVolume) -> Result<f64> {
    same_shape(a, b)?;
    let n = a.data().len() as f64;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

/// `10 log10(range^2 / MSE)`, capped at 99 dB when MSE < 1e-12. `a` is the
/// reference used for the default range.
pub fn psnr(a: &ScalarVolume, b: &ScalarVolume, data_range: Option<f64>) -> Result<f64> {
    let range = data_range.unwrap_or_else(|| default_data_range(a));
    if !(range > 0.0) {
        return Err(Error::invalid(format!("data range must be > 0, got {range}")));
    }
    let m = mse(a, b)?;
    if m < 1e-12 {
        return Ok(PSNR_CAP_DB);
    }
    Ok(10.0 * (range * range / m).log10())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimParams {
    /// Side of the cubic window (odd).
    pub window: usize,
    pub k1: f64,
    pub k2: f64,
    /// Defaults to the range of the first volume.
    pub data_range: Option<f64>,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams { window: 7, k1: 0.01, k2: 0.03, data_range: None }
    }
}

/// 3D summed-area table with a zero border: `t[(h+1, w+1, l+1)]` holds the
/// sum over `[0..=h, 0..=w, 0..=l]`.
struct SummedVolume {
    dims: [usize; 3],
    t: Vec<f64>,
}

impl SummedVolume {
    fn new(shape: Shape, f: impl Fn(usize) -> f64) -> Self {
        let [h, w, l] = shape.0;
        let dims = [h + 1, w + 1, l + 1];
        let mut t = vec![0.0; dims[0] * dims[1] * dims[2]];
        let at = |a: usize, b: usize, c: usize| (a * dims[1] + b) * dims[2] + c;
        for a in 1..=h {
            for b in 1..=w {
                for c in 1..=l {
                    let v = f(shape.index(a - 1, b - 1, c - 1));
                    t[at(a, b, c)] = v + t[at(a - 1, b, c)] + t[at(a, b - 1, c)] + t[at(a, b, c - 1)]
                        - t[at(a - 1, b - 1, c)]
                        - t[at(a - 1, b, c - 1)]
                        - t[at(a, b - 1, c - 1)]
                        + t[at(a - 1, b - 1, c - 1)];
                }
            }
        }
        SummedVolume { dims, t }
    }

    /// Sum over the cube starting at `o` with side `k`.
    fn cube(&self, o: [usize; 3], k: usize) -> f64 {
        let d = self.dims;
        let at = |a: usize, b: usize, c: usize| self.t[(a * d[1] + b) * d[2] + c];
        let [a0, b0, c0] = o;
        let [a1, b1, c1] = [a0 + k, b0 + k, c0 + k];
        at(a1, b1, c1) - at(a0, b1, c1) - at(a1, b0, c1) - at(a1, b1, c0) + at(a0, b0, c1) + at(a0, b1, c0)
            + at(a1, b0, c0)
            - at(a0, b0, c0)
    }
}

/// Mean SSIM over all fully contained cubic windows (uniform weights,
/// sample covariance).
pub fn ssim3d(a: &ScalarVolume, b: &ScalarVolume, params: SsimParams) -> Result<f64> {
    same_shape(a, b)?;
    let k = params.window;
    if k % 2 == 0 || k < 3 {
        return Err(Error::invalid(format!("SSIM window must be odd and >= 3, got {k}")));
    }
    let shape = a.shape();
    if k > shape.min_dim() {
        return Err(Error::invalid(format!("SSIM window {k} exceeds volume {shape}")));
    }
    let range = params.data_range.unwrap_or_else(|| default_data_range(a));
    if !(range > 0.0) {
        return Err(Error::invalid(format!("data range must be > 0, got {range}")));
    }
    let c1 = (params.k1 * range).powi(2);
    let c2 = (params.k2 * range).powi(2);
    let (da, db) = (a.data(), b.data());
    let sa = SummedVolume::new(shape, |i| da[i]);
    let sb = SummedVolume::new(shape, |i| db[i]);
    let saa = SummedVolume::new(shape, |i| da[i] * da[i]);
    let sbb = SummedVolume::new(shape, |i| db[i] * db[i]);
    let sab = SummedVolume::new(shape, |i| da[i] * db[i]);
    let np = (k * k * k) as f64;
    let cov_norm = np / (np - 1.0);
    let [h, w, l] = shape.0;
    let mut total = 0.0;
    let mut count = 0usize;
    for x in 0..=h - k {
        for y in 0..=w - k {
            for z in 0..=l - k {
                let o = [x, y, z];
                let ma = sa.cube(o, k) / np;
                let mb = sb.cube(o, k) / np;
                let va = cov_norm * (saa.cube(o, k) / np - ma * ma);
                let vb = cov_norm * (sbb.cube(o, k) / np - mb * mb);
                let vab = cov_norm * (sab.cube(o, k) / np - ma * mb);
                let num = (2.0 * ma * mb + c1) * (2.0 * vab + c2);
                let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
                total += num / den;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// `2|A ∩ B| / (|A| + |B|)` for the voxels equal to `label`; 1 when both
/// masks are empty.
pub fn dice(a: &ScalarVolume, b: &ScalarVolume, label: f64) -> Result<f64> {
    same_shape(a, b)?;
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (ia, ib) = (x == label, y == label);
        na += ia as usize;
        nb += ib as usize;
        inter += (ia && ib) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Boundary;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn smooth_phantom(n: usize) -> ScalarVolume {
        ScalarVolume::from_fn(Shape::cube(n), Boundary::Clamp, |c| {
            let x = c[0] as f64 / n as f64;
            let y = c[1] as f64 / n as f64;
            let z = c[2] as f64 / n as f64;
            0.5 + 0.4 * (6.0 * x).sin() * (4.0 * y).cos() + 0.1 * z
        })
        .unwrap()
    }

    fn with_noise(v: &ScalarVolume, sigma: f64, seed: u64) -> ScalarVolume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, sigma).unwrap();
        v.map(|x| x + dist.sample(&mut rng)).unwrap()
    }

    #[test]
    fn psnr_definitional_values() {
        let a = ScalarVolume::zeros(Shape::cube(4), Boundary::Clamp);
        assert_eq!(psnr(&a, &a, Some(1.0)).unwrap(), PSNR_CAP_DB);
        let one = ScalarVolume::constant(Shape::cube(4), 1.0, Boundary::Clamp);
        assert_eq!(psnr(&a, &one, Some(1.0)).unwrap(), 0.0);
        let tenth = ScalarVolume::constant(Shape::cube(4), 0.1, Boundary::Clamp);
        assert!((psnr(&a, &tenth, Some(1.0)).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&a, &ScalarVolume::zeros(Shape::cube(3), Boundary::Clamp), None).is_err());
    }

    #[test]
    fn psnr_decreases_with_noise() {
        let a = smooth_phantom(12);
        let values: Vec<f64> =
            [0.01, 0.02, 0.05, 0.1, 0.2].iter().map(|&s| psnr(&a, &with_noise(&a, s, 3), None).unwrap()).collect();
        assert!(values.windows(2).all(|w| w[1] < w[0]), "{values:?}");
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let a = smooth_phantom(12);
        let b = with_noise(&a, 0.05, 1);
        assert_eq!(ssim3d(&a, &a, SsimParams::default()).unwrap(), 1.0);
        let p = SsimParams { data_range: Some(1.0), ..Default::default() };
        let ab = ssim3d(&a, &b, p).unwrap();
        let ba = ssim3d(&b, &a, p).unwrap();
        assert!((ab - ba).abs() <= 1e-12);
        assert!(ab < 1.0);
    }

    #[test]
    fn ssim_drops_under_heavy_noise() {
        // constant signal 1, noise std 1: SNR 0 dB
        let a = ScalarVolume::constant(Shape::cube(12), 1.0, Boundary::Clamp);
        let b = with_noise(&a, 1.0, 2);
        let s = ssim3d(&a, &b, SsimParams { data_range: Some(1.0), ..Default::default() }).unwrap();
        assert!(s < 0.3, "ssim {s}");
    }

    #[test]
    fn ssim_detects_contrast_and_brightness_shift() {
        let a = smooth_phantom(12);
        let b = a.map(|x| 0.7 * x + 0.2).unwrap();
        let p = SsimParams::default();
        assert!(ssim3d(&a, &b, p).unwrap() < ssim3d(&a, &a, p).unwrap());
    }

    #[test]
    fn ssim_window_validation() {
        let a = smooth_phantom(6);
        assert!(ssim3d(&a, &a, SsimParams::default()).is_err());
        assert!(ssim3d(&a, &a, SsimParams { window: 4, ..Default::default() }).is_err());
        assert!(ssim3d(&a, &a, SsimParams { window: 5, ..Default::default() }).is_ok());
    }

    #[test]
    fn ssim_matches_direct_window_loop() {
        let a = smooth_phantom(9);
        let b = with_noise(&a, 0.1, 5);
        let p = SsimParams { window: 3, data_range: Some(1.0), ..Default::default() };
        let fast = ssim3d(&a, &b, p).unwrap();
        let (c1, c2) = (1e-4, 9e-4);
        let mut total = 0.0;
        let mut count = 0.0;
        for x in 0..7 {
            for y in 0..7 {
                for z in 0..7 {
                    let mut va = vec![];
                    let mut vb = vec![];
                    for i in 0..3 {
                        for j in 0..3 {
                            for k in 0..3 {
                                va.push(a.get(x + i, y + j, z + k));
                                vb.push(b.get(x + i, y + j, z + k));
                            }
                        }
                    }
                    let ma = va.iter().sum::<f64>() / 27.0;
                    let mb = vb.iter().sum::<f64>() / 27.0;
                    let sa = va.iter().map(|v| (v - ma).powi(2)).sum::<f64>() / 26.0;
                    let sb = vb.iter().map(|v| (v - mb).powi(2)).sum::<f64>() / 26.0;
                    let sab = va.iter().zip(&vb).map(|(p, q)| (p - ma) * (q - mb)).sum::<f64>() / 26.0;
                    total += (2.0 * ma * mb + c1) * (2.0 * sab + c2) / ((ma * ma + mb * mb + c1) * (sa + sb + c2));
                    count += 1.0;
                }
            }
        }
        assert!((fast - total / count).abs() < 1e-9);
    }

    #[test]
    fn dice_cases() {
        let s = Shape::new(4, 4, 2);
        let a = ScalarVolume::from_fn(s, Boundary::Clamp, |c| if c[0] < 2 { 1.0 } else { 0.0 }).unwrap();
        let b = ScalarVolume::from_fn(s, Boundary::Clamp, |c| if c[0] >= 2 { 1.0 } else { 0.0 }).unwrap();
        let half = ScalarVolume::from_fn(s, Boundary::Clamp, |c| if c[0] >= 1 && c[0] < 3 { 1.0 } else { 0.0 })
            .unwrap();
        assert_eq!(dice(&a, &a, 1.0).unwrap(), 1.0);
        assert_eq!(dice(&a, &b, 1.0).unwrap(), 0.0);
        assert_eq!(dice(&a, &half, 1.0).unwrap(), 0.5);
        assert_eq!(dice(&a, &b, 7.0).unwrap(), 1.0);
        assert_eq!(dice(&a, &half, 1.0).unwrap(), dice(&half, &a, 1.0).unwrap());
    }
}
