//! Versioned binary checkpoints: magic, format version, a JSON header and
//! little-endian tensor data.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::ddpm::{cosine_schedule, NoiseSchedule};
use crate::error::{Error, Result};
use crate::ldt::{Ldt, LdtConfig};

pub const MAGIC: &[u8; 8] = b"MFLDTCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleParams {
    pub steps: usize,
    pub s_offset: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the data section.
    pub offset: usize,
    pub bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub config: LdtConfig,
    pub schedule: ScheduleParams,
    pub step: usize,
    pub seed: u64,
    pub dtype: String,
    /// Caller-defined metadata such as data normalization.
    #[serde(default)]
    pub extra: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// A restored model with its schedule and metadata.
pub struct Checkpoint {
    pub model: Ldt,
    pub schedule: NoiseSchedule,
    pub step: usize,
    pub seed: u64,
    pub extra: serde_json::Value,
}

fn dtype_name(dtype: DType) -> Result<&'static str> {
    match dtype {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(Error::config(format!("checkpoints support f32 and f64, not {other:?}"))),
    }
}

fn tensor_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F32 => flat.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        DType::F64 => flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        other => return Err(Error::config(format!("unsupported tensor dtype {other:?}"))),
    })
}

pub fn save(
    path: &Path,
    model: &Ldt,
    schedule: &NoiseSchedule,
    step: usize,
    seed: u64,
    extra: serde_json::Value,
) -> Result<()> {
    let fail = |reason: String| Error::Checkpoint { path: path.to_path_buf(), reason };
    let mut data = Vec::new();
    let mut tensors = Vec::new();
    for (name, var) in model.params().names().iter().zip(model.params().vars()) {
        let bytes = tensor_bytes(var.as_tensor())?;
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: var.dims().to_vec(),
            offset: data.len(),
            bytes: bytes.len(),
        });
        data.extend(bytes);
    }
    let header = CheckpointHeader {
        config: model.config().clone(),
        schedule: ScheduleParams { steps: schedule.steps(), s_offset: schedule.s_offset() },
        step,
        seed,
        dtype: dtype_name(model.dtype())?.to_string(),
        extra,
        tensors,
    };
    let json = serde_json::to_vec(&header).map_err(|e| fail(e.to_string()))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| fail(e.to_string()))?;
    }
    let mut out = Vec::with_capacity(20 + json.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&data);
    let mut file = fs::File::create(path).map_err(|e| fail(e.to_string()))?;
    file.write_all(&out).map_err(|e| fail(e.to_string()))?;
    Ok(())
}

fn split_file(path: &Path, bytes: &[u8]) -> Result<(CheckpointHeader, usize)> {
    let fail = |reason: &str| Error::Checkpoint { path: PathBuf::from(path), reason: reason.to_string() };
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(fail("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(fail(&format!("format version {version}, expected {FORMAT_VERSION}")));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let end = 20usize.checked_add(len).filter(|&e| e <= bytes.len()).ok_or_else(|| fail("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[20..end]).map_err(|e| fail(&e.to_string()))?;
    Ok((header, end))
}

pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    let bytes = fs::read(path).map_err(|e| Error::Checkpoint { path: path.to_path_buf(), reason: e.to_string() })?;
    Ok(split_file(path, &bytes)?.0)
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let fail = |reason: String| Error::Checkpoint { path: path.to_path_buf(), reason };
    let bytes = fs::read(path).map_err(|e| fail(e.to_string()))?;
    let (header, start) = split_file(path, &bytes)?;
    let dtype = match header.dtype.as_str() {
        "f32" => DType::F32,
        "f64" => DType::F64,
        other => return Err(fail(format!("unknown dtype {other:?}"))),
    };
    let model = Ldt::new(header.config.clone(), header.seed, dtype).map_err(|e| fail(e.to_string()))?;
    let names = model.params().names();
    if names.len() != header.tensors.len() {
        return Err(fail(format!("{} tensors stored, model has {}", header.tensors.len(), names.len())));
    }
    let data = &bytes[start..];
    for ((name, var), entry) in names.iter().zip(model.params().vars()).zip(&header.tensors) {
        if &entry.name != name || entry.shape != var.dims() {
            return Err(fail(format!("tensor {} {:?} does not match model tensor {name} {:?}", entry.name, entry.shape, var.dims())));
        }
        let raw = entry
            .offset
            .checked_add(entry.bytes)
            .and_then(|end| data.get(entry.offset..end))
            .ok_or_else(|| fail(format!("tensor {name} is truncated")))?;
        let t = match dtype {
            DType::F32 => {
                let v: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                Tensor::from_vec(v, var.shape(), model.device())?
            }
            _ => {
                let v: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                Tensor::from_vec(v, var.shape(), model.device())?
            }
        };
        if t.elem_count() != var.elem_count() {
            return Err(fail(format!("tensor {name} has the wrong byte length")));
        }
        var.set(&t)?;
    }
    let schedule = cosine_schedule(header.schedule.steps, header.schedule.s_offset)?;
    Ok(Checkpoint { model, schedule, step: header.step, seed: header.seed, extra: header.extra })
}
