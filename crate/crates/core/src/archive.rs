//! The HLGW weights-archive file format.
//!
//! Layout:
//!
//! ```text
//! magic   b"HLGW"
//! version u32 little-endian (currently 1)
//! idx_len u64 little-endian, byte length of the JSON index
//! index   JSON object: tensor name -> { dtype, shape, offset, length }
//! payload raw little-endian tensor values, in index (name-sorted) order
//! ```
//!
//! Offsets are relative to the start of the payload region. Exported
//! backbone weights use dtype `f32`; trained checkpoints use `f64` so a
//! save/load round trip is bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{NamedTensors, Tensor};

pub const MAGIC: [u8; 4] = *b"HLGW";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DType {
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "f64")]
    F64,
}

impl DType {
    fn byte_width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct IndexEntry {
    dtype: DType,
    shape: Vec<usize>,
    offset: u64,
    length: u64,
}

/// A fully loaded archive.
pub struct Archive {
    path: PathBuf,
    index: BTreeMap<String, IndexEntry>,
    payload: Vec<u8>,
}

fn archive_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Archive {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Writes `tensors` to `path`, all with the same `dtype`. Tensor names are
/// sorted, so identical content always produces identical bytes.
pub fn save(path: &Path, tensors: &NamedTensors, dtype: DType) -> Result<()> {
    let mut index = BTreeMap::new();
    let mut payload: Vec<u8> = Vec::new();
    for (name, tensor) in tensors.iter() {
        let offset = payload.len() as u64;
        match dtype {
            DType::F32 => {
                for &v in tensor.data() {
                    payload.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
            DType::F64 => {
                for &v in tensor.data() {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        index.insert(
            name.clone(),
            IndexEntry {
                dtype,
                shape: tensor.shape().to_vec(),
                offset,
                length: payload.len() as u64 - offset,
            },
        );
    }
    let index_bytes = serde_json::to_vec(&index)?;
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&MAGIC)?;
    file.write_all(&VERSION.to_le_bytes())?;
    file.write_all(&(index_bytes.len() as u64).to_le_bytes())?;
    file.write_all(&index_bytes)?;
    file.write_all(&payload)?;
    Ok(())
}

impl Archive {
    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        if bytes.len() < 16 {
            return Err(archive_err(path, "truncated header"));
        }
        if bytes[0..4] != MAGIC {
            return Err(archive_err(path, "bad magic, not an HLGW archive"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(archive_err(path, format!("unsupported version {version}")));
        }
        let idx_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        if bytes.len() < 16 + idx_len {
            return Err(archive_err(path, "truncated index"));
        }
        let index: BTreeMap<String, IndexEntry> = serde_json::from_slice(&bytes[16..16 + idx_len])
            .map_err(|e| archive_err(path, format!("bad index: {e}")))?;
        let payload = bytes[16 + idx_len..].to_vec();
        for (name, entry) in &index {
            let end = entry.offset + entry.length;
            if end as usize > payload.len() {
                return Err(archive_err(path, format!("truncated payload for `{name}`")));
            }
            let expect = entry.shape.iter().product::<usize>() * entry.dtype.byte_width();
            if expect != entry.length as usize {
                return Err(archive_err(
                    path,
                    format!("length of `{name}` does not match its shape"),
                ));
            }
        }
        Ok(Self {
            path: path.to_path_buf(),
            index,
            payload,
        })
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.index.keys().map(String::as_str)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn shape(&self, name: &str) -> Result<&[usize]> {
        Ok(&self.entry(name)?.shape)
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        let entry = self.entry(name)?;
        let bytes = &self.payload[entry.offset as usize..(entry.offset + entry.length) as usize];
        let data: Vec<f64> = match entry.dtype {
            DType::F32 => bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect(),
            DType::F64 => bytes
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect(),
        };
        Ok(Tensor::from_vec(&entry.shape, data))
    }

    /// Loads every tensor in the archive.
    pub fn all_tensors(&self) -> Result<NamedTensors> {
        let mut out = NamedTensors::new();
        for name in self.index.keys() {
            out.insert(name.clone(), self.tensor(name)?);
        }
        Ok(out)
    }

    fn entry(&self, name: &str) -> Result<&IndexEntry> {
        self.index
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> NamedTensors {
        let mut t = NamedTensors::new();
        t.insert(
            "b/weight",
            Tensor::from_vec(&[2, 2], vec![1.0, -2.0, 0.5, 4.0]),
        );
        t.insert("a/bias", Tensor::from_vec(&[3], vec![0.25, 0.5, 0.75]));
        t
    }

    #[test]
    fn round_trip_f64_is_exact() {
        let dir = std::env::temp_dir().join("hlgw_test_rt");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("w.hlgw");
        let tensors = sample();
        save(&path, &tensors, DType::F64).unwrap();
        let archive = Archive::read(&path).unwrap();
        assert_eq!(archive.all_tensors().unwrap(), tensors);
    }

    #[test]
    fn header_magic_and_determinism() {
        let dir = std::env::temp_dir().join("hlgw_test_magic");
        fs::create_dir_all(&dir).unwrap();
        let (p1, p2) = (dir.join("a.hlgw"), dir.join("b.hlgw"));
        save(&p1, &sample(), DType::F32).unwrap();
        save(&p2, &sample(), DType::F32).unwrap();
        let bytes = fs::read(&p1).unwrap();
        assert_eq!(&bytes[0..4], b"HLGW");
        assert_eq!(bytes, fs::read(&p2).unwrap());
    }

    #[test]
    fn missing_tensor_is_named() {
        let dir = std::env::temp_dir().join("hlgw_test_missing");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("w.hlgw");
        save(&path, &sample(), DType::F32).unwrap();
        let archive = Archive::read(&path).unwrap();
        match archive.tensor("nope/weight") {
            Err(Error::MissingTensor(name)) => assert_eq!(name, "nope/weight"),
            other => panic!("expected MissingTensor, got {other:?}"),
        }
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = std::env::temp_dir().join("hlgw_test_trunc");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("w.hlgw");
        save(&path, &sample(), DType::F32).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&path, &bytes).unwrap();
        assert!(Archive::read(&path).is_err());
    }
}
