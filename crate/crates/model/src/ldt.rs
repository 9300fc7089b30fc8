//! Longitudinal diffusion transformer.
//!
//! Works in token space: a sequence of `T` vector fields becomes a
//! `(T, N, C·P³)` token tensor (see [`patchify`]), and the network maps a
//! batch `(B, T, N, C·P³)` of noisy tokens to predicted noise of the same
//! shape. Spatial blocks attend over the `N` patches of one frame, temporal
//! blocks over the `T` frames of one patch.

use candle_core::{DType, Device, Tensor};
use morphoflow_core::{DiseaseLabel, Shape, VectorField};
use serde::{Deserialize, Serialize};

use crate::ddpm::NoisePredictor;
use crate::error::{Error, Result, StageExt};
use crate::params::{Linear, ParamStore};

const LN_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LdtConfig {
    pub d_model: usize,
    pub n_heads: usize,
    /// Number of (spatial, temporal) block pairs.
    pub n_layers: usize,
    pub patch_size: usize,
    /// Width of the raw age encoding; defaults to `d_model`.
    #[serde(default)]
    pub pe_dim: Option<usize>,
    #[serde(default = "default_channels")]
    pub input_channels: usize,
    pub max_frames: usize,
    pub field_shape: Shape,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
}

fn default_channels() -> usize {
    3
}

fn default_mlp_ratio() -> usize {
    4
}

impl LdtConfig {
    /// Named presets: `mini`, `S`, `L` and `XL` as (d, heads, layers).
    pub fn preset(name: &str, field_shape: Shape, max_frames: usize) -> Result<Self> {
        let (d, h, l, p) = match name.to_ascii_uppercase().as_str() {
            "MINI" | "LDT-MINI" => (64, 4, 2, 4),
            "S" | "LDT-S" => (384, 6, 12, 4),
            "L" | "LDT-L" => (768, 12, 12, 4),
            "XL" | "LDT-XL" => (960, 12, 16, 4),
            _ => return Err(Error::config(format!("unknown model preset {name:?} (expected mini, S, L or XL)"))),
        };
        let cfg = LdtConfig {
            d_model: d,
            n_heads: h,
            n_layers: l,
            patch_size: p,
            pe_dim: None,
            input_channels: 3,
            max_frames,
            field_shape,
            mlp_ratio: 4,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if self.d_model < 6 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} must be >= 6 and divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.pe_dim() == 0 || self.pe_dim() % 2 != 0 {
            return bad(format!("age encoding width {} must be even and positive", self.pe_dim()));
        }
        if self.patch_size == 0 || self.field_shape.dims().iter().any(|n| n % self.patch_size != 0 || *n == 0) {
            return bad(format!("field shape {} is not divisible by patch size {}", self.field_shape, self.patch_size));
        }
        if self.n_layers == 0 || self.max_frames == 0 || self.input_channels == 0 || self.mlp_ratio == 0 {
            return bad("n_layers, max_frames, input_channels and mlp_ratio must be positive".into());
        }
        Ok(())
    }

    pub fn pe_dim(&self) -> usize {
        self.pe_dim.unwrap_or(self.d_model)
    }

    pub fn patch_grid(&self) -> [usize; 3] {
        self.field_shape.dims().map(|n| n / self.patch_size)
    }

    /// Patches per frame, `HWL / P³`.
    pub fn num_patches(&self) -> usize {
        self.patch_grid().iter().product()
    }

    /// Values per token, `C·P³`.
    pub fn token_dim(&self) -> usize {
        self.input_channels * self.patch_size.pow(3)
    }

    /// Number of trainable scalars implied by the configuration.
    pub fn param_count(&self) -> usize {
        let (d, e, r) = (self.d_model, self.token_dim(), self.mlp_ratio);
        let lin = |i: usize, o: usize| i * o + o;
        let block = lin(d, 6 * d) + lin(d, 3 * d) + lin(d, d) + lin(d, r * d) + lin(r * d, d);
        lin(e, d)
            + lin(self.pe_dim(), d)
            + lin(d, d)
            + 2 * lin(d, d)
            + 3 * d
            + 2 * lin(d, d)
            + 2 * self.n_layers * block
            + lin(d, 2 * d)
            + 2 * lin(d, e)
    }
}

/// Raw age encoding `[cos(ω_i a)…, sin(ω_i a)…]` with `ω_i = 1/10000^{2i/D}`.
pub fn age_encoding(age: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::config(format!("age encoding width must be even, got {dim}")));
    }
    let half = dim / 2;
    let omega = |i: usize| 1.0 / 10000f64.powf(2.0 * i as f64 / dim as f64);
    let mut f: Vec<f64> = (0..half).map(|i| (omega(i) * age).cos()).collect();
    f.extend((0..half).map(|i| (omega(i) * age).sin()));
    Ok(f)
}

/// Standard 1D sinusoid of width `dim` at position `pos` (pairs of sin and
/// cos; an odd trailing slot stays zero).
pub fn sinusoid(pos: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let w = 1.0 / 10000f64.powf(i as f64 / half.max(1) as f64);
        out[i] = (pos * w).sin();
        out[half + i] = (pos * w).cos();
    }
    out
}

/// Fixed 3D patch-position table, `N × d`: three ⌊d/3⌋-wide axis
/// sinusoids concatenated, zero-padded to `d`.
pub fn spatial_pos_encoding(grid: [usize; 3], d: usize) -> Vec<f64> {
    let w = d / 3;
    let mut out = Vec::with_capacity(grid.iter().product::<usize>() * d);
    for h in 0..grid[0] {
        for x in 0..grid[1] {
            for l in 0..grid[2] {
                for p in [h, x, l] {
                    out.extend(sinusoid(p as f64, w));
                }
                out.extend(std::iter::repeat_n(0.0, d - 3 * w));
            }
        }
    }
    out
}

/// Fixed frame-index table, `T × d`.
pub fn temporal_pos_encoding(frames: usize, d: usize) -> Vec<f64> {
    (0..frames).flat_map(|t| sinusoid(t as f64, d)).collect()
}

/// Splits a channel-major field into `N` tokens of `C·P³` values, patches in
/// row-major grid order and values ordered (channel, dh, dw, dl).
pub fn patchify(data: &[f64], channels: usize, shape: Shape, p: usize) -> Result<Vec<f64>> {
    check_tiling(data.len(), channels, shape, p)?;
    let [_, w, l] = shape.dims();
    let [gh, gw, gl] = shape.dims().map(|n| n / p);
    let plane = shape.len();
    let mut out = Vec::with_capacity(data.len());
    for ph in 0..gh {
        for pw in 0..gw {
            for pl in 0..gl {
                for c in 0..channels {
                    for dh in 0..p {
                        for dw in 0..p {
                            let row = ((ph * p + dh) * w + pw * p + dw) * l + pl * p;
                            out.extend_from_slice(&data[c * plane + row..c * plane + row + p]);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Exact inverse of [`patchify`].
pub fn unpatchify(tokens: &[f64], channels: usize, shape: Shape, p: usize) -> Result<Vec<f64>> {
    check_tiling(tokens.len(), channels, shape, p)?;
    let [_, w, l] = shape.dims();
    let [gh, gw, gl] = shape.dims().map(|n| n / p);
    let plane = shape.len();
    let mut out = vec![0.0; tokens.len()];
    let mut k = 0;
    for ph in 0..gh {
        for pw in 0..gw {
            for pl in 0..gl {
                for c in 0..channels {
                    for dh in 0..p {
                        for dw in 0..p {
                            let row = ((ph * p + dh) * w + pw * p + dw) * l + pl * p;
                            out[c * plane + row..c * plane + row + p].copy_from_slice(&tokens[k..k + p]);
                            k += p;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

fn check_tiling(len: usize, channels: usize, shape: Shape, p: usize) -> Result<()> {
    if p == 0 || shape.dims().iter().any(|n| n % p != 0) {
        return Err(Error::invalid(format!("shape {shape} is not divisible by patch size {p}")));
    }
    if len != channels * shape.len() {
        return Err(Error::invalid(format!("{len} values for {channels} channels of {shape}")));
    }
    Ok(())
}

/// Token form of a vector field.
pub fn field_tokens(field: &VectorField, p: usize) -> Result<Vec<f64>> {
    patchify(field.data(), 3, field.shape(), p)
}

/// Conditioning for one sequence, in host form.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceCondition {
    /// One age per frame.
    pub ages: Vec<f64>,
    pub label: DiseaseLabel,
    /// Tokens of the baseline's spatial gradient at the field resolution.
    pub grad_tokens: Vec<f64>,
}

/// Embeddings feeding adaLN, each `(B, d)`.
pub struct ConditionBundle {
    pub tau_embed: Tensor,
    pub class_embed: Tensor,
    pub anat_embed: Tensor,
    pub fused: Tensor,
}

/// `norm(x)·(1 + scale) + shift` with per-sample `(B, d)` modulation
/// broadcast over the two token axes of `x: (B, T, N, d)`.
fn modulate(x: &Tensor, shift: &Tensor, scale: &Tensor) -> Result<Tensor> {
    let (b, d) = shift.dims2()?;
    let shift = shift.reshape((b, 1, 1, d))?;
    let scale = (scale.reshape((b, 1, 1, d))? + 1.0)?;
    Ok(crate::ops::layer_norm(x, LN_EPS)?.broadcast_mul(&scale)?.broadcast_add(&shift)?)
}

fn gate(x: &Tensor, g: &Tensor) -> Result<Tensor> {
    let (b, d) = g.dims2()?;
    Ok(x.broadcast_mul(&g.reshape((b, 1, 1, d))?)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Spatial,
    Temporal,
}

struct Block {
    axis: Axis,
    heads: usize,
    modulation: Linear,
    qkv: Linear,
    proj: Linear,
    fc1: Linear,
    fc2: Linear,
}

impl Block {
    fn new(store: &mut ParamStore, name: &str, cfg: &LdtConfig, axis: Axis) -> Result<Self> {
        let d = cfg.d_model;
        Ok(Block {
            axis,
            heads: cfg.n_heads,
            modulation: Linear::zeros(store, &format!("{name}.adaln"), d, 6 * d)?,
            qkv: Linear::xavier(store, &format!("{name}.qkv"), d, 3 * d)?,
            proj: Linear::xavier(store, &format!("{name}.proj"), d, d)?,
            fc1: Linear::xavier(store, &format!("{name}.fc1"), d, cfg.mlp_ratio * d)?,
            fc2: Linear::xavier(store, &format!("{name}.fc2"), cfg.mlp_ratio * d, d)?,
        })
    }

    /// Multi-head self-attention over axis 1 of `x: (B', L, d)`.
    fn attention(&self, x: &Tensor) -> Result<Tensor> {
        let (b, l, d) = x.dims3()?;
        let dh = d / self.heads;
        let qkv = self.qkv.forward(x)?.reshape((b, l, 3, self.heads, dh))?.permute((2, 0, 3, 1, 4))?;
        let q = (qkv.get(0)? * (1.0 / (dh as f64).sqrt()))?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let out = crate::ops::softmax_last(&q.matmul(&k.t()?)?)?.matmul(&v)?;
        let out = out.transpose(1, 2)?.contiguous()?.reshape((b, l, d))?;
        self.proj.forward(&out)
    }

    /// Attention along this block's axis of `x: (B, T, N, d)`.
    fn mix(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, n, d) = x.dims4()?;
        match self.axis {
            Axis::Spatial => self.attention(&x.reshape((b * t, n, d))?)?.reshape((b, t, n, d)).map_err(Into::into),
            Axis::Temporal => {
                let y = x.transpose(1, 2)?.contiguous()?.reshape((b * n, t, d))?;
                let y = self.attention(&y)?.reshape((b, n, t, d))?;
                Ok(y.transpose(1, 2)?.contiguous()?)
            }
        }
    }

    fn forward(&self, x: &Tensor, cond: &Tensor) -> Result<Tensor> {
        let m = self.modulation.forward(&cond.silu()?)?.chunk(6, 1)?;
        let h = modulate(x, &m[0], &m[1])?;
        let x = (x + gate(&self.mix(&h)?, &m[2])?)?;
        let h = modulate(&x, &m[3], &m[4])?;
        let mlp = self.fc2.forward(&crate::ops::gelu(&self.fc1.forward(&h)?)?)?;
        Ok((&x + gate(&mlp, &m[5])?)?)
    }
}

struct Mlp2 {
    a: Linear,
    b: Linear,
}

impl Mlp2 {
    fn new(store: &mut ParamStore, name: &str, inputs: usize, d: usize) -> Result<Self> {
        Ok(Mlp2 { a: Linear::new(store, &format!("{name}.0"), inputs, d)?, b: Linear::new(store, &format!("{name}.1"), d, d)? })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.b.forward(&self.a.forward(x)?.silu()?)
    }
}

pub struct Ldt {
    cfg: LdtConfig,
    store: ParamStore,
    embed: Linear,
    age_mlp: Mlp2,
    tau_mlp: Mlp2,
    label_table: Tensor,
    fuse: Mlp2,
    blocks: Vec<Block>,
    final_mod: Linear,
    final_out: Linear,
    input_gain: Linear,
    spatial_pe: Tensor,
    temporal_pe: Tensor,
}

impl Ldt {
    pub fn new(cfg: LdtConfig, seed: u64, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let device = Device::Cpu;
        let mut store = ParamStore::new(seed, dtype, device.clone());
        let (d, e) = (cfg.d_model, cfg.token_dim());
        let embed = Linear::xavier(&mut store, "embed", e, d)?;
        let age_mlp = Mlp2::new(&mut store, "age_mlp", cfg.pe_dim(), d)?;
        let tau_mlp = Mlp2::new(&mut store, "tau_mlp", d, d)?;
        let label_table = store.normal("label_table", &[DiseaseLabel::ALL.len(), d], 0.02)?;
        let fuse = Mlp2::new(&mut store, "fuse", d, d)?;
        let mut blocks = Vec::with_capacity(2 * cfg.n_layers);
        for i in 0..cfg.n_layers {
            blocks.push(Block::new(&mut store, &format!("blocks.{i}.spatial"), &cfg, Axis::Spatial)?);
            blocks.push(Block::new(&mut store, &format!("blocks.{i}.temporal"), &cfg, Axis::Temporal)?);
        }
        let final_mod = Linear::zeros(&mut store, "final.adaln", d, 2 * d)?;
        let final_out = Linear::zeros(&mut store, "final.out", d, e)?;
        let input_gain = Linear::zeros(&mut store, "final.input_gain", d, e)?;
        let spatial_pe = Tensor::from_vec(spatial_pos_encoding(cfg.patch_grid(), d), (cfg.num_patches(), d), &device)?
            .to_dtype(dtype)?;
        let temporal_pe =
            Tensor::from_vec(temporal_pos_encoding(cfg.max_frames, d), (cfg.max_frames, d), &device)?.to_dtype(dtype)?;
        Ok(Ldt {
            cfg,
            store,
            embed,
            age_mlp,
            tau_mlp,
            label_table,
            fuse,
            blocks,
            final_mod,
            final_out,
            input_gain,
            spatial_pe,
            temporal_pe,
        })
    }

    pub fn config(&self) -> &LdtConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn block_axis(&self, i: usize) -> Axis {
        self.blocks[i].axis
    }

    /// Uploads host values as a tensor in the model's dtype.
    pub fn tensor(&self, values: Vec<f64>, dims: &[usize]) -> Result<Tensor> {
        Ok(Tensor::from_vec(values, dims, self.device())?.to_dtype(self.dtype())?)
    }

    /// Frame-wise patch embedding κ of `(…, C·P³)` tokens.
    pub fn patch_embed(&self, tokens: &Tensor) -> Result<Tensor> {
        self.embed.forward(tokens)
    }

    /// MLP of the raw age encodings, `(B, T, d)`.
    pub fn age_embed(&self, ages: &[f64], batch: usize) -> Result<Tensor> {
        if batch == 0 || ages.len() % batch != 0 {
            return Err(Error::invalid(format!("{} ages do not split into {batch} sequences", ages.len())));
        }
        let dim = self.cfg.pe_dim();
        let mut raw = Vec::with_capacity(ages.len() * dim);
        for &a in ages {
            raw.extend(age_encoding(a, dim)?);
        }
        let f = self.tensor(raw, &[batch, ages.len() / batch, dim])?;
        self.age_mlp.forward(&f)
    }

    /// Condition embeddings from steps, labels and gradient tokens `(B, N, C·P³)`.
    pub fn condition(&self, taus: &[usize], labels: &[DiseaseLabel], grad_tokens: &Tensor) -> Result<ConditionBundle> {
        let b = taus.len();
        if labels.len() != b || grad_tokens.dim(0)? != b {
            return Err(Error::invalid(format!("condition batch sizes differ: {b} steps, {} labels", labels.len())));
        }
        let d = self.cfg.d_model;
        let tau_raw: Vec<f64> = taus.iter().flat_map(|&t| sinusoid(t as f64, d)).collect();
        let tau_embed = self.tau_mlp.forward(&self.tensor(tau_raw, &[b, d])?)?;
        let ids: Vec<u32> = labels.iter().map(|l| l.index() as u32).collect();
        let class_embed = self.label_table.index_select(&Tensor::new(ids.as_slice(), self.device())?, 0)?;
        let anat_embed = self.patch_embed(grad_tokens)?.mean(1)?;
        let fused = self.fuse.forward(&((&tau_embed + &class_embed)? + &anat_embed)?)?;
        Ok(ConditionBundle { tau_embed, class_embed, anat_embed, fused })
    }

    /// Embedded, age- and position-encoded tokens `(B, T, N, d)`.
    pub fn encode(&self, tokens: &Tensor, ages: &[f64]) -> Result<Tensor> {
        let (b, t, n, e) = tokens.dims4()?;
        if n != self.cfg.num_patches() || e != self.cfg.token_dim() {
            return Err(Error::invalid(format!(
                "tokens ({n}, {e}) do not match the configured ({}, {})",
                self.cfg.num_patches(),
                self.cfg.token_dim()
            )));
        }
        if t == 0 || t > self.cfg.max_frames || ages.len() != b * t {
            return Err(Error::invalid(format!(
                "{} ages for {b} sequences of {t} frames (max {})",
                ages.len(),
                self.cfg.max_frames
            )));
        }
        let d = self.cfg.d_model;
        let age = self.age_embed(ages, b)?.reshape((b, t, 1, d))?;
        let pos = self.spatial_pe.reshape((1, 1, n, d))?;
        Ok(self.patch_embed(tokens)?.broadcast_add(&age)?.broadcast_add(&pos)?)
    }

    /// Block `i` applied to `x: (B, T, N, d)`; temporal blocks first add the
    /// frame-index encoding.
    pub fn block(&self, i: usize, x: &Tensor, cond: &Tensor) -> Result<Tensor> {
        let blk = &self.blocks[i];
        match blk.axis {
            Axis::Spatial => blk.forward(x, cond),
            Axis::Temporal => {
                let (_, t, _, d) = x.dims4()?;
                let pe = self.temporal_pe.narrow(0, 0, t)?.reshape((1, t, 1, d))?;
                blk.forward(&x.broadcast_add(&pe)?, cond)
            }
        }
    }

    /// Final adaLN and projection back to `(B, T, N, C·P³)`, plus a
    /// condition-dependent per-value gain on the noisy input tokens. The
    /// gain lets the prediction span all `C·P³` values when `d` is smaller.
    pub fn head(&self, x: &Tensor, cond: &Tensor, tokens: &Tensor) -> Result<Tensor> {
        let c = cond.silu()?;
        let m = self.final_mod.forward(&c)?.chunk(2, 1)?;
        let (b, e) = (tokens.dim(0)?, self.cfg.token_dim());
        let gain = self.input_gain.forward(&c)?.reshape((b, 1, 1, e))?;
        Ok((self.final_out.forward(&modulate(x, &m[0], &m[1])?)? + tokens.broadcast_mul(&gain)?)?)
    }

    /// Predicted noise for noisy tokens `(B, T, N, C·P³)`.
    pub fn forward(
        &self,
        tokens: &Tensor,
        taus: &[usize],
        ages: &[f64],
        labels: &[DiseaseLabel],
        grad_tokens: &Tensor,
    ) -> Result<Tensor> {
        let x = self.encode(tokens, ages).stage("patch embedding")?;
        let cond = self.condition(taus, labels, grad_tokens).stage("conditioning")?.fused;
        let mut x = x;
        for i in 0..self.blocks.len() {
            x = self.block(i, &x, &cond).stage("transformer block")?;
        }
        self.head(&x, &cond, tokens).stage("output projection")
    }

    /// Batched forward pass from host buffers.
    pub fn forward_host(&self, z: &[f64], taus: &[usize], conds: &[&SequenceCondition]) -> Result<Tensor> {
        let b = taus.len();
        if conds.len() != b || b == 0 {
            return Err(Error::invalid("one condition per sample is required"));
        }
        let (n, e) = (self.cfg.num_patches(), self.cfg.token_dim());
        let t = conds[0].ages.len();
        if conds.iter().any(|c| c.ages.len() != t || c.grad_tokens.len() != n * e) {
            return Err(Error::invalid("conditions in a batch must share frame count and token layout"));
        }
        if z.len() != b * t * n * e {
            return Err(Error::invalid(format!("{} values for {b} sequences of {t}×{n}×{e} tokens", z.len())));
        }
        let tokens = self.tensor(z.to_vec(), &[b, t, n, e])?;
        let grads = self.tensor(conds.iter().flat_map(|c| c.grad_tokens.iter().copied()).collect(), &[b, n, e])?;
        let ages: Vec<f64> = conds.iter().flat_map(|c| c.ages.iter().copied()).collect();
        let labels: Vec<DiseaseLabel> = conds.iter().map(|c| c.label).collect();
        self.forward(&tokens, taus, &ages, &labels, &grads)
    }
}

pub fn to_host(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

/// Noise prediction with one condition per sample, or a single condition
/// shared by the whole batch.
impl NoisePredictor for Ldt {
    type Cond = Vec<SequenceCondition>;

    fn predict_noise(&self, z: &[f64], taus: &[usize], cond: &Vec<SequenceCondition>) -> Result<Vec<f64>> {
        let conds: Vec<&SequenceCondition> = match cond.len() {
            1 => vec![&cond[0]; taus.len()],
            n if n == taus.len() => cond.iter().collect(),
            n => return Err(Error::invalid(format!("{n} conditions for a batch of {}", taus.len()))),
        };
        to_host(&self.forward_host(z, taus, &conds)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> LdtConfig {
        LdtConfig {
            d_model: 16,
            n_heads: 2,
            n_layers: 1,
            patch_size: 2,
            pe_dim: None,
            input_channels: 3,
            max_frames: 4,
            field_shape: Shape::cube(4),
            mlp_ratio: 2,
        }
    }

    #[test]
    fn age_encoding_values() {
        let f = age_encoding(0.0, 8).unwrap();
        assert_eq!(f, vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let g = age_encoding(71.3, 128).unwrap();
        assert_eq!(g[0], 71.3f64.cos());
        assert!(g.iter().all(|v| v.abs() <= 1.0));
        assert!(age_encoding(1.0, 7).is_err());
    }

    #[test]
    fn age_encoding_injective_on_cohort_ages() {
        let ages: Vec<f64> = (0..=370).map(|i| 55.0 + 0.1 * i as f64).collect();
        let enc: Vec<Vec<f64>> = ages.iter().map(|&a| age_encoding(a, 128).unwrap()).collect();
        let mut min = f64::INFINITY;
        for i in 0..enc.len() {
            for j in i + 1..enc.len() {
                let d: f64 = enc[i].iter().zip(&enc[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                min = min.min(d);
            }
        }
        assert!(min > 0.0, "{min}");
    }

    fn min_pairwise(rows: &[f64], d: usize) -> f64 {
        let n = rows.len() / d;
        let mut min = f64::INFINITY;
        for i in 0..n {
            for j in i + 1..n {
                let s: f64 = (0..d).map(|k| (rows[i * d + k] - rows[j * d + k]).powi(2)).sum();
                min = min.min(s.sqrt());
            }
        }
        min
    }

    #[test]
    fn spatial_encoding_is_unique_and_bounded() {
        let pe = spatial_pos_encoding([8, 8, 8], 64);
        assert_eq!(pe.len(), 512 * 64);
        assert!(pe.iter().all(|v| v.abs() <= 1.0));
        assert!(min_pairwise(&pe, 64) > 0.0);
    }

    #[test]
    fn temporal_encoding_rows() {
        assert_eq!(temporal_pos_encoding(1, 384).len(), 384);
        let pe = temporal_pos_encoding(64, 384);
        assert!(pe.iter().all(|v| v.abs() <= 1.0));
        assert!(min_pairwise(&pe, 384) > 0.0);
    }

    #[test]
    fn patch_tiling_round_trip() {
        let shape = Shape::new(4, 8, 4);
        let data: Vec<f64> = (0..3 * shape.len()).map(|i| i as f64).collect();
        let tokens = patchify(&data, 3, shape, 2).unwrap();
        assert_eq!(tokens.len(), data.len());
        assert_eq!(unpatchify(&tokens, 3, shape, 2).unwrap(), data);
        assert_eq!(&tokens[..4], &[0.0, 1.0, 4.0, 5.0]);
        assert!(patchify(&data, 3, shape, 3).is_err());
    }

    #[test]
    fn patch_count() {
        let cfg = LdtConfig::preset("mini", Shape::cube(16), 3).unwrap();
        assert_eq!(cfg.num_patches(), 64);
        assert_eq!(cfg.token_dim(), 192);
    }

    #[test]
    fn preset_sizes_order() {
        let s = Shape::cube(32);
        let count = |n: &str| LdtConfig::preset(n, s, 3).unwrap().param_count();
        assert!(count("S") < count("L") && count("L") < count("XL"));
        let model = Ldt::new(tiny(), 0, DType::F32).unwrap();
        assert_eq!(model.params().num_params(), tiny().param_count());
        assert!(LdtConfig::preset("XXL", s, 3).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(tiny().validate().is_ok());
        assert!(LdtConfig { n_heads: 3, ..tiny() }.validate().is_err());
        assert!(LdtConfig { pe_dim: Some(7), ..tiny() }.validate().is_err());
        assert!(LdtConfig { field_shape: Shape::cube(5), ..tiny() }.validate().is_err());
    }
}
