//! Flat name -> tensor archives (safetensors) with a string metadata header
//! carrying `config` (JSON) and `version`.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::nn::ParamStore;

pub const FORMAT_VERSION: &str = "1";

#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, Tensor>,
    pub metadata: BTreeMap<String, String>,
}

fn ckpt_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Checkpoint(format!("{}: {e}", path.display()))
}

fn tensor_bytes(t: &Tensor) -> Result<(safetensors::Dtype, Vec<u8>)> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F64 => (
            safetensors::Dtype::F64,
            flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        ),
        _ => (
            safetensors::Dtype::F32,
            flat.to_dtype(DType::F32)?
                .to_vec1::<f32>()?
                .iter()
                .flat_map(|v| v.to_le_bytes())
                .collect(),
        ),
    })
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_config<C: Serialize>(config: &C) -> Result<Self> {
        let mut c = Self::new();
        c.metadata.insert("config".into(), serde_json::to_string(config)?);
        c.metadata.insert("version".into(), FORMAT_VERSION.into());
        Ok(c)
    }

    pub fn config<C: DeserializeOwned>(&self) -> Result<C> {
        let text = self
            .metadata
            .get("config")
            .ok_or_else(|| Error::Checkpoint("header has no `config` entry".into()))?;
        Ok(serde_json::from_str(text)?)
    }

    /// Adds every parameter of `store`, name-for-name.
    pub fn add_store(&mut self, store: &ParamStore) {
        for (name, var) in store.vars() {
            self.tensors.insert(name, var.as_tensor().clone());
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let encoded: Vec<(String, safetensors::Dtype, Vec<u8>, Vec<usize>)> = self
            .tensors
            .iter()
            .map(|(n, t)| {
                let (dt, b) = tensor_bytes(t)?;
                Ok((n.clone(), dt, b, t.dims().to_vec()))
            })
            .collect::<Result<_>>()?;
        let views = encoded
            .iter()
            .map(|(n, dt, b, s)| {
                safetensors::tensor::TensorView::new(*dt, s.clone(), b)
                    .map(|v| (n.clone(), v))
                    .map_err(|e| ckpt_err(path, e))
            })
            .collect::<Result<Vec<_>>>()?;
        let meta: HashMap<String, String> = self.metadata.clone().into_iter().collect();
        safetensors::serialize_to_file(views, Some(meta), path).map_err(|e| ckpt_err(path, e))
    }

    /// Reads an archive; a zero-length file reads as an empty archive.
    pub fn read(path: &Path, device: &Device) -> Result<Self> {
        let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if data.is_empty() {
            return Ok(Self::new());
        }
        let st = safetensors::SafeTensors::deserialize(&data).map_err(|e| ckpt_err(path, e))?;
        let (_, header) =
            safetensors::SafeTensors::read_metadata(&data).map_err(|e| ckpt_err(path, e))?;
        let metadata = header
            .metadata()
            .clone()
            .map(|m| m.into_iter().collect())
            .unwrap_or_default();
        let mut tensors = BTreeMap::new();
        for (name, view) in st.tensors() {
            let shape = view.shape().to_vec();
            let t = match view.dtype() {
                safetensors::Dtype::F32 => {
                    let v: Vec<f32> = view
                        .data()
                        .chunks_exact(4)
                        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                        .collect();
                    Tensor::from_vec(v, shape, device)?
                }
                safetensors::Dtype::F64 => {
                    let v: Vec<f64> = view
                        .data()
                        .chunks_exact(8)
                        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                        .collect();
                    Tensor::from_vec(v, shape, device)?
                }
                other => return Err(ckpt_err(path, format!("{name}: unsupported dtype {other:?}"))),
            };
            tensors.insert(name, t);
        }
        Ok(Self { tensors, metadata })
    }
}

/// Outcome of loading archive tensors into a parameter store.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub loaded: Vec<String>,
    /// Archive entries not applied, with the reason.
    pub skipped: Vec<(String, String)>,
    /// Store parameters (under the prefix) absent from the archive.
    pub missing: Vec<String>,
}

impl std::fmt::Display for LoadReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} loaded, {} skipped, {} missing",
            self.loaded.len(),
            self.skipped.len(),
            self.missing.len()
        )
    }
}

/// Copies archive tensors named `prefix*` into matching store parameters.
///
/// Non-strict loading skips unknown names and shape mismatches; strict
/// loading fails on any skip or missing parameter and leaves the store
/// untouched.
pub fn load_into(store: &ParamStore, ckpt: &Checkpoint, prefix: &str, strict: bool) -> Result<LoadReport> {
    let mut report = LoadReport::default();
    let mut apply = Vec::new();
    for (name, t) in ckpt.tensors.iter().filter(|(n, _)| n.starts_with(prefix)) {
        match store.get(name) {
            None => report.skipped.push((name.clone(), "not a model parameter".into())),
            Some(v) if v.dims() != t.dims() => report.skipped.push((
                name.clone(),
                format!("shape {:?} != model {:?}", t.dims(), v.dims()),
            )),
            Some(_) => apply.push((name.clone(), t)),
        }
    }
    report.missing = store
        .names()
        .into_iter()
        .filter(|n| n.starts_with(prefix) && !ckpt.tensors.contains_key(n))
        .collect();
    if strict && (!report.skipped.is_empty() || !report.missing.is_empty()) {
        return Err(Error::Checkpoint(format!("strict load failed: {report}; first issue: {}", {
            report
                .skipped
                .first()
                .map(|(n, r)| format!("{n}: {r}"))
                .or_else(|| report.missing.first().map(|n| format!("{n}: missing")))
                .unwrap_or_default()
        })));
    }
    for (name, t) in apply {
        store.set(&name, t)?;
        report.loaded.push(name);
    }
    Ok(report)
}
