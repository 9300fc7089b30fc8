//! Named trainable tensors with host-side seeded initialization.
//!
//! The tensor backend's CPU generator cannot be seeded, so every random
//! draw is made on the host and uploaded.

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub struct ParamStore {
    device: Device,
    dtype: DType,
    names: Vec<String>,
    vars: Vec<Var>,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: Device) -> Self {
        ParamStore { device, dtype, names: vec![], vars: vec![], rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    fn push(&mut self, name: String, dims: &[usize], values: Vec<f64>) -> Result<Tensor> {
        if self.names.contains(&name) {
            return Err(Error::config(format!("duplicate parameter {name}")));
        }
        let t = Tensor::from_vec(values, dims, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let handle = var.as_tensor().clone();
        self.names.push(name);
        self.vars.push(var);
        Ok(handle)
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform(&mut self, name: impl Into<String>, dims: &[usize], bound: f64) -> Result<Tensor> {
        let n = dims.iter().product();
        let values = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        self.push(name.into(), dims, values)
    }

    pub fn zeros(&mut self, name: impl Into<String>, dims: &[usize]) -> Result<Tensor> {
        let n = dims.iter().product();
        self.push(name.into(), dims, vec![0.0; n])
    }

    pub fn normal(&mut self, name: impl Into<String>, dims: &[usize], std: f64) -> Result<Tensor> {
        let n = dims.iter().product();
        let values = (0..n).map(|_| std * self.rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
        self.push(name.into(), dims, values)
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.names.iter().position(|n| n == name).map(|i| &self.vars[i])
    }

    pub fn num_params(&self) -> usize {
        self.vars.iter().map(|v| v.elem_count()).sum()
    }

    /// Overwrites every parameter with uniform noise in `[-scale, scale]`.
    pub fn randomize(&mut self, seed: u64, scale: f64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for var in &self.vars {
            let values: Vec<f64> = (0..var.elem_count()).map(|_| rng.random_range(-scale..=scale)).collect();
            let t = Tensor::from_vec(values, var.shape(), &self.device)?.to_dtype(self.dtype)?;
            var.set(&t)?;
        }
        Ok(())
    }
}

/// Affine map over the last axis; weights stored as `(in, out)`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Uniform `±1/√in` initialization.
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize) -> Result<Self> {
        let bound = 1.0 / (inputs as f64).sqrt();
        Ok(Linear {
            weight: store.uniform(format!("{name}.weight"), &[inputs, outputs], bound)?,
            bias: store.uniform(format!("{name}.bias"), &[outputs], bound)?,
        })
    }

    /// Xavier-uniform weights and zero bias.
    pub fn xavier(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize) -> Result<Self> {
        let bound = (6.0 / (inputs + outputs) as f64).sqrt();
        Ok(Linear {
            weight: store.uniform(format!("{name}.weight"), &[inputs, outputs], bound)?,
            bias: store.zeros(format!("{name}.bias"), &[outputs])?,
        })
    }

    pub fn zeros(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize) -> Result<Self> {
        Ok(Linear {
            weight: store.zeros(format!("{name}.weight"), &[inputs, outputs])?,
            bias: store.zeros(format!("{name}.bias"), &[outputs])?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let inputs = *dims.last().ok_or_else(|| Error::invalid("linear layer on a scalar"))?;
        let rows = x.elem_count() / inputs.max(1);
        let y = x.reshape((rows, inputs))?.matmul(&self.weight)?.broadcast_add(&self.bias)?;
        let mut out = dims;
        *out.last_mut().unwrap() = self.weight.dim(1)?;
        Ok(y.reshape(out)?)
    }
}
