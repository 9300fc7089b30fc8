//! Raw volume files: little-endian `f32`, voxel order `(h * W + w) * L + l`.
//! Vector fields store their three component planes consecutively.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::volume::{Boundary, ScalarVolume, Shape, VectorField};

pub fn write_raw_f32(path: &Path, values: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for &v in values {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_raw_f32(path: &Path, expected_len: usize) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected_len * 4 {
        return Err(Error::invalid(format!(
            "{}: expected {} bytes ({expected_len} floats), found {}",
            path.display(),
            expected_len * 4,
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

pub fn write_volume(path: &Path, vol: &ScalarVolume) -> Result<()> {
    write_raw_f32(path, vol.data())
}

pub fn read_volume(path: &Path, shape: Shape, boundary: Boundary) -> Result<ScalarVolume> {
    ScalarVolume::new(shape, read_raw_f32(path, shape.len())?, boundary)
}

pub fn write_field(path: &Path, field: &VectorField) -> Result<()> {
    write_raw_f32(path, field.data())
}

pub fn read_field(path: &Path, shape: Shape, boundary: Boundary) -> Result<VectorField> {
    VectorField::new(shape, read_raw_f32(path, 3 * shape.len())?, boundary)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Json { path: path.into(), source: e })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json { path: path.into(), source: e })
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raw_layout_is_little_endian_f32() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.raw");
        let vol = ScalarVolume::from_fn(Shape::new(2, 3, 4), Boundary::Clamp, |c| {
            (c[0] * 100 + c[1] * 10 + c[2]) as f64
        })
        .unwrap();
        write_volume(&path, &vol).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 24 * 4);
        // linear index (h*W + w)*L + l = (1*3 + 2)*4 + 3 = 23
        assert_eq!(&bytes[23 * 4..], &123.0f32.to_le_bytes());
        assert_eq!(read_volume(&path, vol.shape(), Boundary::Clamp).unwrap(), vol);
    }

    #[test]
    fn field_planes_are_component_major() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.raw");
        let f = VectorField::constant(Shape::cube(2), [1.0, 2.0, 3.0], Boundary::Wrap);
        write_field(&path, &f).unwrap();
        let raw = read_raw_f32(&path, 24).unwrap();
        assert_eq!(&raw[..8], &[1.0; 8]);
        assert_eq!(&raw[16..], &[3.0; 8]);
        assert!(read_raw_f32(&path, 25).is_err());
    }
}
