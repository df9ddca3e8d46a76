//! Named-tensor archive.
//!
//! Layout on disk:
//!
//! ```text
//! u64 little-endian  header length in bytes
//! UTF-8 JSON header  {"manifest": [{name, dtype, shape, offset, nbytes}, ...], "metadata": {...}}
//! payload            raw little-endian f32 values, row-major, offsets relative to payload start
//! ```
//!
//! Values are stored as raw bit patterns, so round trips are bit-exact
//! (signed zeros and NaN payloads included).

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{ArchiveError, EscError, Result};

const DTYPE_F32: &str = "f32";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    manifest: Vec<ManifestEntry>,
    #[serde(default)]
    metadata: Map<String, Value>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Self {
        let t = Self {
            name: name.into(),
            shape,
            data,
        };
        debug_assert_eq!(t.shape.iter().product::<usize>(), t.data.len());
        t
    }

    pub fn from_tensor(name: impl Into<String>, tensor: &candle_core::Tensor) -> Result<Self> {
        let data = tensor
            .to_dtype(candle_core::DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?;
        Ok(Self::new(name, tensor.dims().to_vec(), data))
    }

    pub fn to_tensor(
        &self,
        dtype: candle_core::DType,
        device: &candle_core::Device,
    ) -> Result<candle_core::Tensor> {
        let t = candle_core::Tensor::from_slice(&self.data, self.shape.as_slice(), device)?;
        Ok(t.to_dtype(dtype)?)
    }
}

/// An ordered collection of named f32 tensors plus free-form JSON metadata.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub tensors: Vec<NamedTensor>,
    pub metadata: Map<String, Value>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, tensor: NamedTensor) {
        self.tensors.push(tensor);
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|t| t.name.as_str())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut manifest = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for t in &self.tensors {
            let nbytes = (t.data.len() * 4) as u64;
            manifest.push(ManifestEntry {
                name: t.name.clone(),
                dtype: DTYPE_F32.to_string(),
                shape: t.shape.clone(),
                offset,
                nbytes,
            });
            offset += nbytes;
        }
        let header = serde_json::to_vec(&Header {
            manifest,
            metadata: self.metadata.clone(),
        })?;
        let mut out = Vec::with_capacity(8 + header.len() + offset as usize);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |reason: String| -> EscError {
            ArchiveError::Corrupt {
                path: path.to_path_buf(),
                reason,
            }
            .into()
        };
        if bytes.len() < 8 {
            return Err(corrupt(format!("file holds {} bytes, no header", bytes.len())));
        }
        let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        if header_len > bytes.len() - 8 {
            return Err(corrupt(format!(
                "header declares {header_len} bytes but only {} remain",
                bytes.len() - 8
            )));
        }
        let header: Header = serde_json::from_slice(&bytes[8..8 + header_len])
            .map_err(|e| corrupt(format!("manifest is not valid JSON: {e}")))?;
        let payload = &bytes[8 + header_len..];

        let mut seen = BTreeSet::new();
        let mut end = 0u64;
        let mut tensors = Vec::with_capacity(header.manifest.len());
        for entry in &header.manifest {
            if !seen.insert(entry.name.clone()) {
                return Err(corrupt(format!("duplicate tensor `{}`", entry.name)));
            }
            if entry.dtype != DTYPE_F32 {
                return Err(corrupt(format!(
                    "tensor `{}` has unsupported dtype `{}`",
                    entry.name, entry.dtype
                )));
            }
            let numel: usize = entry.shape.iter().product();
            if entry.nbytes != (numel * 4) as u64 {
                return Err(corrupt(format!(
                    "tensor `{}` declares {} bytes but shape {:?} holds {}",
                    entry.name,
                    entry.nbytes,
                    entry.shape,
                    numel * 4
                )));
            }
            let stop = entry.offset.checked_add(entry.nbytes).ok_or_else(|| {
                corrupt(format!("tensor `{}` offset overflows", entry.name))
            })?;
            if stop > payload.len() as u64 {
                return Err(corrupt(format!(
                    "tensor `{}` spans bytes {}..{} but payload holds {}",
                    entry.name,
                    entry.offset,
                    stop,
                    payload.len()
                )));
            }
            end = end.max(stop);
            let raw = &payload[entry.offset as usize..stop as usize];
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push(NamedTensor::new(entry.name.clone(), entry.shape.clone(), data));
        }
        if end != payload.len() as u64 {
            return Err(corrupt(format!(
                "manifest accounts for {end} payload bytes but payload holds {}",
                payload.len()
            )));
        }
        Ok(Self {
            tensors,
            metadata: header.metadata,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| EscError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| EscError::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Checks that every `(name, shape)` in `expected` is present with that shape,
    /// reporting every offender at once.
    pub fn check_schema(&self, expected: &[(String, Vec<usize>)], path: &Path) -> Result<()> {
        let mut missing = Vec::new();
        let mut mismatched = Vec::new();
        for (name, shape) in expected {
            match self.get(name) {
                None => missing.push(name.clone()),
                Some(t) if &t.shape != shape => mismatched.push(format!(
                    "`{name}`: expected {shape:?}, found {:?}",
                    t.shape
                )),
                Some(_) => {}
            }
        }
        if !missing.is_empty() {
            return Err(ArchiveError::MissingTensor {
                path: path.to_path_buf(),
                names: missing,
            }
            .into());
        }
        if !mismatched.is_empty() {
            return Err(ArchiveError::ShapeMismatch {
                path: path.to_path_buf(),
                offenders: mismatched,
            }
            .into());
        }
        Ok(())
    }
}
