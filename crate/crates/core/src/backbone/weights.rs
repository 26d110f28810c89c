//! Reading and writing safetensors weight files.
//!
//! The format is a little-endian u64 header length, a JSON header mapping
//! tensor names to dtype/shape/offsets, then the raw data buffer. Only F32
//! and F64 tensors are supported; everything is widened to f64 in memory.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct TensorHeader {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [usize; 2],
}

#[derive(Debug, Clone)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn elems(&self) -> usize {
        self.shape.iter().product()
    }
}

pub type WeightMap = BTreeMap<String, Tensor>;

pub fn read_safetensors(path: &Path) -> Result<WeightMap> {
    let mut file = std::fs::File::open(path).map_err(|e| Error::Resolution {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes)?;
    let header: BTreeMap<String, serde_json::Value> = serde_json::from_slice(&header_bytes)?;
    let mut buffer = Vec::new();
    file.read_to_end(&mut buffer)?;

    let mut map = WeightMap::new();
    for (name, value) in header {
        if name == "__metadata__" {
            continue;
        }
        let th: TensorHeader = serde_json::from_value(value)?;
        let [start, end] = th.data_offsets;
        if end > buffer.len() || start > end {
            return Err(Error::data(format!(
                "tensor {name} has invalid offsets {start}..{end}"
            )));
        }
        let bytes = &buffer[start..end];
        let elems: usize = th.shape.iter().product::<usize>().max(1);
        let data = match th.dtype.as_str() {
            "F32" => {
                if bytes.len() != elems * 4 {
                    return Err(Error::data(format!("tensor {name}: size mismatch")));
                }
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                    .collect()
            }
            "F64" => {
                if bytes.len() != elems * 8 {
                    return Err(Error::data(format!("tensor {name}: size mismatch")));
                }
                bytes
                    .chunks_exact(8)
                    .map(|c| {
                        f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]])
                    })
                    .collect()
            }
            other => {
                return Err(Error::data(format!(
                    "tensor {name}: unsupported dtype {other} (export weights as F32)"
                )))
            }
        };
        map.insert(
            name,
            Tensor {
                shape: th.shape,
                data,
            },
        );
    }
    Ok(map)
}

/// Write a weight map as an F32 safetensors file.
pub fn write_safetensors(path: &Path, weights: &WeightMap) -> Result<()> {
    let mut header = BTreeMap::new();
    let mut offset = 0usize;
    for (name, tensor) in weights {
        let bytes = tensor.elems() * 4;
        header.insert(
            name.clone(),
            TensorHeader {
                dtype: "F32".to_string(),
                shape: tensor.shape.clone(),
                data_offsets: [offset, offset + bytes],
            },
        );
        offset += bytes;
    }
    let header_json = serde_json::to_vec(&header)?;
    let mut file = std::fs::File::create(path)?;
    file.write_all(&(header_json.len() as u64).to_le_bytes())?;
    file.write_all(&header_json)?;
    for tensor in weights.values() {
        for &v in &tensor.data {
            file.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

/// Look up a tensor and check its shape.
pub fn expect_tensor<'a>(map: &'a WeightMap, name: &str, shape: &[usize]) -> Result<&'a Tensor> {
    let t = map
        .get(name)
        .ok_or_else(|| Error::data(format!("weights file is missing tensor {name}")))?;
    if t.shape != shape {
        return Err(Error::data(format!(
            "tensor {name}: expected shape {shape:?}, got {:?}",
            t.shape
        )));
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_shapes_and_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.safetensors");
        let mut map = WeightMap::new();
        map.insert(
            "a.weight".into(),
            Tensor {
                shape: vec![2, 3],
                data: vec![1.0, -2.5, 0.25, 3.0, 0.0, -1.0],
            },
        );
        map.insert(
            "b".into(),
            Tensor {
                shape: vec![4],
                data: vec![0.5; 4],
            },
        );
        write_safetensors(&path, &map).unwrap();
        let loaded = read_safetensors(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded["a.weight"].shape, vec![2, 3]);
        for (x, y) in loaded["a.weight"].data.iter().zip(&map["a.weight"].data) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn missing_tensor_is_a_data_error() {
        let map = WeightMap::new();
        assert!(matches!(
            expect_tensor(&map, "nope", &[1]),
            Err(Error::Data(_))
        ));
    }
}
