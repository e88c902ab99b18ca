//! Binary model and adapter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   "TLMCKPT\0" (model) or "TLMLORA\0" (adapter)
//! version      u32       currently 1
//! header_len   u64       byte length of the JSON header
//! header       JSON      config plus an ordered tensor table
//! data         f64 LE    every tensor's values, row-major, in table order
//! ```
//!
//! Model header: `{"config": ModelConfig, "tensors": [{"name", "shape"}]}`,
//! tensors in parameter-slot order. Adapter header: `{"config": LoraConfig,
//! "model": ModelConfig, "base_checksum": u64, "tensors": [{"name", "shape",
//! "layer", "target", "factor"}]}` with each pair stored as B then A. The
//! adapter file does not embed base weights, so it loads without the base
//! checkpoint; `base_checksum` lets callers detect a mismatched base.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tlm_core::autodiff::Tensor;
use tlm_core::lora::{LoraAdapter, LoraConfig, LoraPair, LoraTarget};
use tlm_core::model::{LanguageModel, ModelConfig};

use crate::error::{Result, TlmError};

pub const MODEL_MAGIC: &[u8; 8] = b"TLMCKPT\0";
pub const ADAPTER_MAGIC: &[u8; 8] = b"TLMLORA\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    layer: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    target: Option<LoraTarget>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    factor: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct AdapterHeader {
    config: LoraConfig,
    model: ModelConfig,
    base_checksum: u64,
    tensors: Vec<TensorEntry>,
}

fn encode_file<H: Serialize>(magic: &[u8; 8], header: &H, tensors: &[&Tensor]) -> Vec<u8> {
    let header = serde_json::to_vec(header).expect("header serializes");
    let values: usize = tensors.iter().map(|t| t.len()).sum();
    let mut out = Vec::with_capacity(20 + header.len() + 8 * values);
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for t in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Splits a checkpoint into its parsed header and raw data section.
fn decode_file<'a, H: Deserialize<'a>>(path: &Path, magic: &[u8; 8], bytes: &'a [u8]) -> Result<(H, &'a [u8])> {
    if bytes.len() < 20 || &bytes[..8] != magic {
        return Err(TlmError::format(path, "bad checkpoint magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(TlmError::format(path, format!("unsupported checkpoint version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let rest = &bytes[20..];
    if rest.len() < header_len {
        return Err(TlmError::format(path, "truncated checkpoint header"));
    }
    let header = serde_json::from_slice(&rest[..header_len])
        .map_err(|e| TlmError::format(path, format!("checkpoint header: {e}")))?;
    Ok((header, &rest[header_len..]))
}

fn read_tensors(path: &Path, entries: &[TensorEntry], mut data: &[u8]) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        let n: usize = e.shape.iter().product();
        if data.len() < 8 * n {
            return Err(TlmError::format(path, format!("truncated data for {}", e.name)));
        }
        let values = data[..8 * n].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        data = &data[8 * n..];
        out.push(Tensor::new(e.shape.clone(), values)?);
    }
    if !data.is_empty() {
        return Err(TlmError::format(path, format!("{} trailing bytes", data.len())));
    }
    Ok(out)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| TlmError::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| TlmError::io(path, e))
}

pub fn model_to_bytes(model: &LanguageModel) -> Vec<u8> {
    let header = ModelHeader {
        config: model.config().clone(),
        tensors: model
            .named_params()
            .map(|(name, t)| TensorEntry { name, shape: t.shape().to_vec(), layer: None, target: None, factor: None })
            .collect(),
    };
    let tensors: Vec<&Tensor> = model.params().iter().collect();
    encode_file(MODEL_MAGIC, &header, &tensors)
}

pub fn save_model(model: &LanguageModel, path: &Path) -> Result<()> {
    write(path, &model_to_bytes(model))
}

pub fn load_model(path: &Path) -> Result<LanguageModel> {
    let bytes = read(path)?;
    let (header, data): (ModelHeader, _) = decode_file(path, MODEL_MAGIC, &bytes)?;
    let tensors = read_tensors(path, &header.tensors, data)?;
    Ok(LanguageModel::from_params(header.config, tensors)?)
}

pub fn adapter_to_bytes(adapter: &LoraAdapter, model: &ModelConfig, base_checksum: u64) -> Vec<u8> {
    let mut entries = Vec::new();
    let mut tensors = Vec::new();
    for p in adapter.pairs() {
        for (factor, t) in [("b", &p.b), ("a", &p.a)] {
            entries.push(TensorEntry {
                name: format!("{}.lora_{factor}", p.slot().name()),
                shape: t.shape().to_vec(),
                layer: Some(p.layer),
                target: Some(p.target),
                factor: Some(factor.to_string()),
            });
            tensors.push(t);
        }
    }
    let header = AdapterHeader { config: adapter.config().clone(), model: model.clone(), base_checksum, tensors: entries };
    encode_file(ADAPTER_MAGIC, &header, &tensors)
}

pub fn save_adapter(adapter: &LoraAdapter, model: &ModelConfig, base_checksum: u64, path: &Path) -> Result<()> {
    write(path, &adapter_to_bytes(adapter, model, base_checksum))
}

/// Returns the adapter with the base checksum it was trained against.
pub fn load_adapter(path: &Path) -> Result<(LoraAdapter, u64)> {
    let bytes = read(path)?;
    let (header, data): (AdapterHeader, _) = decode_file(path, ADAPTER_MAGIC, &bytes)?;
    let tensors = read_tensors(path, &header.tensors, data)?;
    if tensors.len() % 2 != 0 {
        return Err(TlmError::format(path, "adapter tensors must come in B/A pairs"));
    }
    let mut pairs = Vec::new();
    for (entries, ts) in header.tensors.chunks(2).zip(tensors.chunks(2)) {
        let (Some(layer), Some(target)) = (entries[0].layer, entries[0].target) else {
            return Err(TlmError::format(path, format!("{} lacks layer/target", entries[0].name)));
        };
        if entries[0].factor.as_deref() != Some("b") || entries[1].factor.as_deref() != Some("a") {
            return Err(TlmError::format(path, "adapter pair not stored as B then A"));
        }
        pairs.push(LoraPair { layer, target, b: ts[0].clone(), a: ts[1].clone() });
    }
    let adapter = LoraAdapter::from_pairs(&header.model, header.config, pairs)?;
    Ok((adapter, header.base_checksum))
}
