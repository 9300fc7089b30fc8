use candle_core::{Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use morphoflow_model::ddpm::{
    corrector_step, draw_training_example, sample, standard_normal, DEFAULT_SNR, DEFAULT_STEPS, DEFAULT_S_OFFSET,
};
use morphoflow_model::params::{Linear, ParamStore};
use morphoflow_model::{cosine_schedule, DType, NoisePredictor, NoiseSchedule, Result, SamplerConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Exact noise predictor for data drawn i.i.d. from `N(mu, sigma²)`:
/// `E[ε | z] = √(1−ᾱ)(z − √ᾱ μ) / (ᾱσ² + 1 − ᾱ)`.
struct GaussianOracle {
    sched: NoiseSchedule,
    mu: f64,
    sigma: f64,
}

impl NoisePredictor for GaussianOracle {
    type Cond = ();

    fn predict_noise(&self, z: &[f64], taus: &[usize], _: &()) -> Result<Vec<f64>> {
        let dim = z.len() / taus.len();
        Ok(z.iter()
            .enumerate()
            .map(|(i, &zi)| {
                let ab = self.sched.alpha_bar(taus[i / dim]);
                (1.0 - ab).sqrt() * (zi - ab.sqrt() * self.mu) / (ab * self.sigma * self.sigma + 1.0 - ab)
            })
            .collect())
    }
}

fn moments(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    (mean, (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt())
}

fn draw(corrector_steps: usize, seed: u64) -> (f64, f64) {
    let sched = cosine_schedule(DEFAULT_STEPS, DEFAULT_S_OFFSET).unwrap();
    let oracle = GaussianOracle { sched: sched.clone(), mu: 0.5, sigma: 0.3 };
    let cfg = SamplerConfig { corrector_steps, snr: DEFAULT_SNR };
    let z = sample(&oracle, &(), 2, 4000, &sched, cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    moments(&z)
}

#[test]
fn ancestral_sampling_with_the_exact_score_recovers_the_data_law() {
    let (mean, std) = draw(0, 1);
    assert!((mean - 0.5).abs() < 0.02, "mean {mean}");
    assert!((std - 0.3).abs() < 0.02, "std {std}");
}

#[test]
fn corrector_steps_keep_the_data_law() {
    let (mean, std) = draw(2, 2);
    assert!((mean - 0.5).abs() < 0.02, "mean {mean}");
    assert!((std - 0.3).abs() < 0.02, "std {std}");
}

#[test]
fn sampling_is_reproducible_per_seed() {
    assert_eq!(draw(1, 3), draw(1, 3));
    assert_ne!(draw(1, 3), draw(1, 4));
}

/// `E|X − Y|` for two sorted samples, by a merge over prefix sums.
fn mean_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    let mut total = 0.0;
    let (mut j, mut below_sum) = (0, 0.0);
    let b_sum: f64 = b.iter().sum();
    for &x in a {
        while j < b.len() && b[j] < x {
            below_sum += b[j];
            j += 1;
        }
        total += x * j as f64 - below_sum + (b_sum - below_sum) - x * (b.len() - j) as f64;
    }
    total / (a.len() * b.len()) as f64
}

fn energy_distance(x: &[f64], y: &[f64]) -> f64 {
    let sorted = |v: &[f64]| {
        let mut v = v.to_vec();
        v.sort_by(f64::total_cmp);
        v
    };
    let (x, y) = (sorted(x), sorted(y));
    2.0 * mean_abs_diff(&x, &y) - mean_abs_diff(&x, &x) - mean_abs_diff(&y, &y)
}

#[test]
fn energy_distance_matches_pairwise_sum() {
    let x = [0.3, -1.0, 2.5, 0.0];
    let y = [1.0, 0.2, -0.4];
    let pair = |a: &[f64], b: &[f64]| {
        a.iter().flat_map(|p| b.iter().map(move |q| (p - q).abs())).sum::<f64>() / (a.len() * b.len()) as f64
    };
    let direct = 2.0 * pair(&x, &y) - pair(&x, &x) - pair(&y, &y);
    assert!((energy_distance(&x, &y) - direct).abs() < 1e-12);
}

#[test]
fn corrector_moves_a_wrong_law_toward_the_marginal() {
    let sched = cosine_schedule(DEFAULT_STEPS, DEFAULT_S_OFFSET).unwrap();
    let oracle = GaussianOracle { sched: sched.clone(), mu: 0.5, sigma: 0.3 };
    let tau = 300;
    let ab = sched.alpha_bar(tau);
    let (mean, std) = (ab.sqrt() * 0.5, (ab * 0.09 + 1.0 - ab).sqrt());
    let n = 20_000;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let target: Vec<f64> = standard_normal(n, &mut rng).iter().map(|e| mean + std * e).collect();
    let mut z: Vec<f64> = standard_normal(n, &mut rng).iter().map(|e| mean + 0.8 + 0.6 * std * e).collect();
    let mut distances = vec![energy_distance(&z, &target)];
    for _ in 0..2 {
        let eps = oracle.predict_noise(&z, &[tau], &()).unwrap();
        z = corrector_step(&z, &eps, tau, &sched, DEFAULT_SNR, &standard_normal(n, &mut rng)).unwrap();
        distances.push(energy_distance(&z, &target));
    }
    assert!(distances.windows(2).all(|w| w[1] < w[0]), "{distances:?}");
}

/// Two-layer SiLU network on `(z, √ᾱ, √(1−ᾱ), log SNR)`, applied
/// elementwise. The output is scaled by `√(1−ᾱ)` so the network itself
/// predicts the negative score, which stays O(1) down to the last step.
struct TinyDenoiser {
    store: ParamStore,
    layers: Vec<Linear>,
    sched: NoiseSchedule,
}

impl TinyDenoiser {
    fn new(sched: NoiseSchedule) -> Self {
        let mut store = ParamStore::new(1, DType::F32, Device::Cpu);
        let layers = vec![
            Linear::new(&mut store, "l0", 4, 64).unwrap(),
            Linear::new(&mut store, "l1", 64, 64).unwrap(),
            Linear::new(&mut store, "l2", 64, 1).unwrap(),
        ];
        TinyDenoiser { store, layers, sched }
    }

    fn forward(&self, z: &[f64], taus: &[usize]) -> Tensor {
        let dim = z.len() / taus.len();
        let feats: Vec<f32> = z
            .iter()
            .enumerate()
            .flat_map(|(i, &v)| {
                let ab = self.sched.alpha_bar(taus[i / dim]);
                [v as f32, ab.sqrt() as f32, (1.0 - ab).sqrt() as f32, (ab / (1.0 - ab)).ln() as f32 / 10.0]
            })
            .collect();
        let mut x = Tensor::from_vec(feats, (z.len(), 4), &Device::Cpu).unwrap();
        for (k, layer) in self.layers.iter().enumerate() {
            x = layer.forward(&x).unwrap();
            if k + 1 < self.layers.len() {
                x = x.silu().unwrap();
            }
        }
        let scale: Vec<f32> = (0..z.len()).map(|i| (1.0 - self.sched.alpha_bar(taus[i / dim])).sqrt() as f32).collect();
        (x.flatten_all().unwrap() * Tensor::from_vec(scale, z.len(), &Device::Cpu).unwrap()).unwrap()
    }
}

impl NoisePredictor for TinyDenoiser {
    type Cond = ();

    fn predict_noise(&self, z: &[f64], taus: &[usize], _: &()) -> Result<Vec<f64>> {
        Ok(self.forward(z, taus).to_dtype(DType::F64).unwrap().to_vec1().unwrap())
    }
}

const MIX: [(f64, f64, f64); 2] = [(0.4, -1.0, 0.25), (0.6, 1.0, 0.35)];

fn mixture_draw(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let (_, m, s) = if rng.random::<f64>() < MIX[0].0 { MIX[0] } else { MIX[1] };
            m + s * standard_normal(1, rng)[0]
        })
        .collect()
}

fn mixture_pdf(x: f64) -> f64 {
    MIX.iter().map(|(w, m, s)| w * (-(x - m).powi(2) / (2.0 * s * s)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt())).sum()
}

/// Bin masses of the mixture on `[lo, hi)` by Simpson's rule.
fn mixture_bins(lo: f64, width: f64, bins: usize) -> Vec<f64> {
    (0..bins)
        .map(|b| {
            let (a, m) = (lo + b as f64 * width, 64);
            let h = width / m as f64;
            let sum: f64 = (0..=m)
                .map(|k| {
                    let c = if k == 0 || k == m { 1.0 } else if k % 2 == 1 { 4.0 } else { 2.0 };
                    c * mixture_pdf(a + k as f64 * h)
                })
                .sum();
            sum * h / 3.0
        })
        .collect()
}

/// Total variation between a sample and the mixture over 0.25-wide bins on
/// `[-2.5, 2.5)`, with everything outside as one extra bin.
fn mixture_tv(z: &[f64]) -> f64 {
    let (lo, width, bins) = (-2.5, 0.25, 20);
    let expected = mixture_bins(lo, width, bins);
    let mut hist = vec![0.0; bins];
    for v in z {
        let b = ((v - lo) / width).floor();
        if b >= 0.0 && (b as usize) < bins {
            hist[b as usize] += 1.0 / z.len() as f64;
        }
    }
    let outside = (1.0 - hist.iter().sum::<f64>()) - (1.0 - expected.iter().sum::<f64>());
    0.5 * (hist.iter().zip(&expected).map(|(p, q)| (p - q).abs()).sum::<f64>() + outside.abs())
}

fn draw_mixture_samples<M: NoisePredictor<Cond = ()>>(model: &M, corrector_steps: usize) -> Vec<f64> {
    let sched = cosine_schedule(DEFAULT_STEPS, DEFAULT_S_OFFSET).unwrap();
    let cfg = SamplerConfig { corrector_steps, snr: DEFAULT_SNR };
    sample(model, &(), 1, 4000, &sched, cfg, &mut ChaCha8Rng::seed_from_u64(10)).unwrap()
}

#[test]
fn trained_tiny_denoiser_recovers_a_two_component_mixture() {
    let sched = cosine_schedule(DEFAULT_STEPS, DEFAULT_S_OFFSET).unwrap();
    let model = TinyDenoiser::new(sched.clone());
    let mut opt = AdamW::new(model.store.vars().to_vec(), ParamsAdamW { lr: 3e-3, weight_decay: 0.0, ..Default::default() })
        .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (batch, steps) = (512, 3000);
    for step in 0..steps {
        opt.set_learning_rate(3e-3 * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / steps as f64).cos()));
        let x0 = mixture_draw(batch, &mut rng);
        let draw = draw_training_example(&x0, batch, &sched, &mut rng).unwrap();
        let eps = Tensor::from_vec(draw.eps.iter().map(|&v| v as f32).collect::<Vec<_>>(), batch, &Device::Cpu).unwrap();
        let loss = (model.forward(&draw.z_tau, &draw.taus) - eps).unwrap().sqr().unwrap().mean_all().unwrap();
        opt.backward_step(&loss).unwrap();
    }
    let tv = mixture_tv(&draw_mixture_samples(&model, 0));
    assert!(tv < 0.1, "total variation {tv:.3}");
}

struct MixtureOracle {
    sched: NoiseSchedule,
}

impl NoisePredictor for MixtureOracle {
    type Cond = ();

    fn predict_noise(&self, z: &[f64], taus: &[usize], _: &()) -> Result<Vec<f64>> {
        let dim = z.len() / taus.len();
        Ok(z.iter()
            .enumerate()
            .map(|(i, &x)| {
                let ab = self.sched.alpha_bar(taus[i / dim]);
                let (mut p, mut dp) = (0.0, 0.0);
                for (w, m, s) in MIX {
                    let (mu, var) = (ab.sqrt() * m, ab * s * s + 1.0 - ab);
                    let g = w * (-(x - mu).powi(2) / (2.0 * var)).exp() / var.sqrt();
                    p += g;
                    dp += -g * (x - mu) / var;
                }
                -(1.0 - ab).sqrt() * dp / p
            })
            .collect())
    }
}

#[test]
fn corrector_sampling_with_the_exact_mixture_score_recovers_the_mixture() {
    let model = MixtureOracle { sched: cosine_schedule(DEFAULT_STEPS, DEFAULT_S_OFFSET).unwrap() };
    for corrector_steps in [0, 2] {
        let tv = mixture_tv(&draw_mixture_samples(&model, corrector_steps));
        assert!(tv < 0.1, "corrector steps {corrector_steps}: total variation {tv:.3}");
    }
}
