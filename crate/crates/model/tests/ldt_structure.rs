use morphoflow_core::{DiseaseLabel, Shape};
use morphoflow_model::ldt::{field_tokens, patchify, to_host, unpatchify, Axis};
use morphoflow_model::{DType, Ldt, LdtConfig, SequenceCondition};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn toy() -> LdtConfig {
    LdtConfig {
        d_model: 16,
        n_heads: 2,
        n_layers: 1,
        patch_size: 2,
        pe_dim: None,
        input_channels: 3,
        max_frames: 2,
        field_shape: Shape::cube(4),
        mlp_ratio: 2,
    }
}

fn random(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn trained_like(cfg: LdtConfig) -> Ldt {
    let mut m = Ldt::new(cfg, 1, DType::F64).unwrap();
    m.params_mut().randomize(2, 0.3).unwrap();
    m
}

fn cond_tensor(m: &Ldt, b: usize) -> morphoflow_model::ldt::ConditionBundle {
    let cfg = m.config();
    let grads = m.tensor(random(b * cfg.num_patches() * cfg.token_dim(), 9), &[b, cfg.num_patches(), cfg.token_dim()]).unwrap();
    m.condition(&vec![500; b], &vec![DiseaseLabel::Mci; b], &grads).unwrap()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Splits `(B=1, T, N, d)` host values into per-(frame, patch) rows.
fn rows(v: &[f64], t: usize, n: usize, d: usize) -> Vec<Vec<&[f64]>> {
    (0..t).map(|f| (0..n).map(|p| &v[(f * n + p) * d..(f * n + p + 1) * d]).collect()).collect()
}

#[test]
fn spatial_blocks_only_mix_within_a_frame() {
    let cfg = LdtConfig { max_frames: 3, ..toy() };
    let m = trained_like(cfg.clone());
    let (t, n, d) = (3, cfg.num_patches(), cfg.d_model);
    let cond = cond_tensor(&m, 1).fused;
    let x = random(t * n * d, 3);
    let mut y = x.clone();
    for v in &mut y[n * d..2 * n * d] {
        *v += 0.5;
    }
    let i = (0..m.num_blocks()).find(|&i| m.block_axis(i) == Axis::Spatial).unwrap();
    let run = |v: &[f64]| to_host(&m.block(i, &m.tensor(v.to_vec(), &[1, t, n, d]).unwrap(), &cond).unwrap()).unwrap();
    let (a, b) = (run(&x), run(&y));
    let (ra, rb) = (rows(&a, t, n, d), rows(&b, t, n, d));
    for f in [0, 2] {
        for p in 0..n {
            assert!(max_abs_diff(ra[f][p], rb[f][p]) < 1e-6, "frame {f} patch {p} changed");
        }
    }
    assert!(max_abs_diff(ra[1][0], rb[1][0]) > 1e-3);
}

#[test]
fn temporal_blocks_only_mix_one_patch_index() {
    let cfg = LdtConfig { max_frames: 3, ..toy() };
    let m = trained_like(cfg.clone());
    let (t, n, d) = (3, cfg.num_patches(), cfg.d_model);
    let cond = cond_tensor(&m, 1).fused;
    let x = random(t * n * d, 4);
    let mut y = x.clone();
    let target = 5;
    for f in 0..t {
        for v in &mut y[(f * n + target) * d..(f * n + target + 1) * d] {
            *v -= 0.7;
        }
    }
    let i = (0..m.num_blocks()).find(|&i| m.block_axis(i) == Axis::Temporal).unwrap();
    let run = |v: &[f64]| to_host(&m.block(i, &m.tensor(v.to_vec(), &[1, t, n, d]).unwrap(), &cond).unwrap()).unwrap();
    let (a, b) = (run(&x), run(&y));
    let (ra, rb) = (rows(&a, t, n, d), rows(&b, t, n, d));
    for f in 0..t {
        for p in (0..n).filter(|&p| p != target) {
            assert!(max_abs_diff(ra[f][p], rb[f][p]) < 1e-6, "frame {f} patch {p} changed");
        }
        assert!(max_abs_diff(ra[f][target], rb[f][target]) > 1e-3);
    }
}

#[test]
fn every_block_is_the_identity_at_initialization() {
    let cfg = toy();
    let m = Ldt::new(cfg.clone(), 5, DType::F64).unwrap();
    let (t, n, d) = (2, cfg.num_patches(), cfg.d_model);
    let cond = cond_tensor(&m, 2).fused;
    let x = random(2 * t * n * d, 6);
    let xt = m.tensor(x.clone(), &[2, t, n, d]).unwrap();
    for i in 0..m.num_blocks() {
        let y = to_host(&m.block(i, &xt, &cond).unwrap()).unwrap();
        if m.block_axis(i) == Axis::Spatial {
            assert_eq!(y, x, "block {i}");
        } else {
            // Temporal blocks add the frame-index encoding before the residual path.
            let pe = morphoflow_model::ldt::temporal_pos_encoding(t, d);
            for (k, (a, b)) in y.iter().zip(&x).enumerate() {
                let f = (k / (n * d)) % t;
                assert!((a - b - pe[f * d + k % d]).abs() < 1e-12, "block {i}");
            }
        }
    }
    // With zero-initialized output layers the untrained network predicts zero noise.
    let c = SequenceCondition { ages: vec![70.0, 72.0], label: DiseaseLabel::Cn, grad_tokens: random(n * cfg.token_dim(), 7) };
    let out = m.forward_host(&random(t * n * cfg.token_dim(), 8), &[10], &[&c]).unwrap();
    assert!(to_host(&out).unwrap().iter().all(|&v| v == 0.0));
}

#[test]
fn patch_tiling_round_trip_at_desk_scale() {
    let shape = Shape::cube(16);
    let data = random(3 * shape.len(), 10);
    let tokens = patchify(&data, 3, shape, 4).unwrap();
    assert_eq!(tokens.len(), data.len());
    assert_eq!(unpatchify(&tokens, 3, shape, 4).unwrap(), data);
    let field = morphoflow_core::VectorField::new(shape, data.clone(), morphoflow_core::Boundary::Wrap).unwrap();
    assert_eq!(field_tokens(&field, 4).unwrap(), tokens);
}

#[test]
fn each_voxel_depends_only_on_its_patch_token() {
    let (shape, p) = (Shape::new(8, 4, 12), 4);
    let tokens = random(3 * shape.len(), 19);
    let base = unpatchify(&tokens, 3, shape, p).unwrap();
    let token_dim = 3 * p * p * p;
    let grid = [shape.0[0] / p, shape.0[1] / p, shape.0[2] / p];
    let target = 4;
    let mut bumped = tokens.clone();
    for v in &mut bumped[target * token_dim..(target + 1) * token_dim] {
        *v += 1.0;
    }
    let moved = unpatchify(&bumped, 3, shape, p).unwrap();
    let patch_of = |i: usize| {
        let c = shape.coords(i % shape.len());
        ((c[0] / p) * grid[1] + c[1] / p) * grid[2] + c[2] / p
    };
    for i in 0..base.len() {
        assert_eq!(moved[i] != base[i], patch_of(i) == target, "voxel {i}");
    }
}

/// L1 loss of one fixed draw, and its gradient with respect to every
/// parameter element.
fn loss_and_grads(m: &Ldt, z: &[f64], eps: &[f64], taus: &[usize], conds: &[&SequenceCondition]) -> (f64, Vec<Vec<f64>>) {
    let out = m.forward_host(z, taus, conds).unwrap();
    let target = m.tensor(eps.to_vec(), out.dims()).unwrap();
    let loss = (target - out).unwrap().abs().unwrap().mean_all().unwrap();
    let grads = loss.backward().unwrap();
    let g = m
        .params()
        .vars()
        .iter()
        .map(|v| grads.get(v.as_tensor()).map(|g| to_host(g).unwrap()).unwrap_or_else(|| vec![0.0; v.elem_count()]))
        .collect();
    (to_host(&loss).unwrap()[0], g)
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let cfg = toy();
    let m = trained_like(cfg.clone());
    let (t, n, e) = (2, cfg.num_patches(), cfg.token_dim());
    let c1 = SequenceCondition { ages: vec![70.0, 73.0], label: DiseaseLabel::Ad, grad_tokens: random(n * e, 11) };
    let c2 = SequenceCondition { ages: vec![60.5, 61.0], label: DiseaseLabel::Cn, grad_tokens: random(n * e, 12) };
    let conds = [&c1, &c2];
    let z = random(2 * t * n * e, 13);
    let eps = random(2 * t * n * e, 14);
    let taus = [100, 900];
    let (_, grads) = loss_and_grads(&m, &z, &eps, &taus, &conds);

    let h = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut checked = 0;
    for (vi, var) in m.params().vars().iter().enumerate() {
        let base = to_host(var.as_tensor()).unwrap();
        for _ in 0..2 {
            let k = rng.random_range(0..base.len());
            let eval = |delta: f64| {
                let mut v = base.clone();
                v[k] += delta;
                var.set(&m.tensor(v, var.dims()).unwrap()).unwrap();
                let (l, _) = loss_and_grads(&m, &z, &eps, &taus, &conds);
                l
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            var.set(&m.tensor(base.clone(), var.dims()).unwrap()).unwrap();
            let an = grads[vi][k];
            let scale = fd.abs().max(an.abs());
            if scale < 1e-7 {
                continue;
            }
            let name = &m.params().names()[vi];
            assert!((fd - an).abs() / scale < 1e-2, "{name}[{k}]: analytic {an:e} vs numeric {fd:e}");
            checked += 1;
        }
    }
    assert!(checked > 20, "only {checked} parameters had a measurable gradient");
}

#[test]
fn prediction_depends_on_every_condition() {
    let cfg = toy();
    let m = trained_like(cfg.clone());
    let (t, n, e) = (2, cfg.num_patches(), cfg.token_dim());
    let z = random(t * n * e, 16);
    let base = SequenceCondition { ages: vec![70.0, 72.0], label: DiseaseLabel::Cn, grad_tokens: random(n * e, 17) };
    let run = |c: &SequenceCondition, tau: usize| to_host(&m.forward_host(&z, &[tau], &[c]).unwrap()).unwrap();
    let reference = run(&base, 300);
    let variants = [
        SequenceCondition { ages: vec![70.0, 75.0], ..base.clone() },
        SequenceCondition { ages: vec![72.0, 70.0], ..base.clone() },
        SequenceCondition { label: DiseaseLabel::Ad, ..base.clone() },
        SequenceCondition { grad_tokens: random(n * e, 18), ..base.clone() },
    ];
    for v in &variants {
        assert!(max_abs_diff(&run(v, 300), &reference) > 1e-4, "{v:?}");
    }
    assert!(max_abs_diff(&run(&base, 301), &reference) > 1e-6);
}
