//! Single-file checkpoints: safetensors payload with JSON metadata.
//!
//! Metadata keys: `format_version`, `network_spec`, `epoch`, `info` (train counts,
//! method and inference head). Readers accept any file with the same major version.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Tensor};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use super::{tensor_bytes, HeadMode, Network, NetworkSpec};
use crate::error::{GlmcError, Result};

pub const FORMAT_VERSION: &str = "1.0";

/// Run provenance carried alongside the parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointInfo {
    /// Per-class counts of the training subset; drives Many/Medium/Few grouping.
    pub train_counts: Vec<usize>,
    /// `glmc` or `ce`.
    pub method: String,
    pub inference_head: HeadMode,
    /// Seed the parameters were initialised from.
    pub init_seed: u64,
}

pub fn save(network: &Network, info: &CheckpointInfo, path: &Path) -> Result<()> {
    let dtype = match network.dtype() {
        DType::F64 => Dtype::F64,
        _ => Dtype::F32,
    };
    let buffers: Vec<(String, Vec<usize>, Vec<u8>)> = network
        .store()
        .params()
        .iter()
        .map(|p| Ok((p.name.clone(), p.var.dims().to_vec(), tensor_bytes(p.var.as_tensor())?)))
        .collect::<Result<_>>()?;
    let views = buffers
        .iter()
        .map(|(name, shape, bytes)| {
            TensorView::new(dtype, shape.clone(), bytes)
                .map(|v| (name.clone(), v))
                .map_err(|e| GlmcError::format(path, e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut meta = HashMap::new();
    meta.insert("format_version".to_string(), FORMAT_VERSION.to_string());
    meta.insert("network_spec".to_string(), serde_json::to_string(network.spec())?);
    meta.insert("epoch".to_string(), network.trained_epochs().to_string());
    meta.insert("info".to_string(), serde_json::to_string(info)?);
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| GlmcError::io(parent, e))?;
        }
    }
    // write then rename so a crash never leaves a truncated checkpoint behind
    let tmp = path.with_extension("tmp");
    safetensors::serialize_to_file(views, Some(meta), &tmp).map_err(|e| GlmcError::format(&tmp, e.to_string()))?;
    fs::rename(&tmp, path).map_err(|e| GlmcError::io(path, e))?;
    Ok(())
}

/// Rebuild the network from its stored spec and load every parameter.
pub fn load(path: &Path) -> Result<(Network, CheckpointInfo)> {
    let bytes = fs::read(path).map_err(|e| GlmcError::io(path, e))?;
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| GlmcError::format(path, e.to_string()))?;
    let meta = header
        .metadata()
        .clone()
        .ok_or_else(|| GlmcError::format(path, "missing metadata"))?;
    let field = |k: &str| meta.get(k).ok_or_else(|| GlmcError::format(path, format!("missing `{k}`")));
    let version = field("format_version")?;
    if version.split('.').next() != FORMAT_VERSION.split('.').next() {
        return Err(GlmcError::format(path, format!("unsupported format version {version}")));
    }
    let spec: NetworkSpec = serde_json::from_str(field("network_spec")?)?;
    let info: CheckpointInfo = serde_json::from_str(field("info")?)?;
    let epoch: usize = field("epoch")?
        .parse()
        .map_err(|e| GlmcError::format(path, format!("epoch: {e}")))?;

    let tensors = SafeTensors::deserialize(&bytes).map_err(|e| GlmcError::format(path, e.to_string()))?;
    let dtype = match tensors.tensors().first().map(|(_, v)| v.dtype()) {
        Some(Dtype::F64) => DType::F64,
        _ => DType::F32,
    };
    let mut network = Network::build(
        &spec.encoder_id,
        spec.input,
        spec.num_classes,
        Some(spec.proj_dim),
        dtype,
        info.init_seed,
    )?;
    if network.spec() != &spec {
        return Err(GlmcError::format(path, "stored spec does not match the rebuilt network"));
    }
    for p in network.store().params() {
        let view = tensors
            .tensor(&p.name)
            .map_err(|e| GlmcError::format(path, format!("{}: {e}", p.name)))?;
        if view.shape() != p.var.dims() {
            return Err(GlmcError::format(path, format!("{} has shape {:?}", p.name, view.shape())));
        }
        let t = match view.dtype() {
            Dtype::F64 => {
                let v: Vec<f64> = view.data().chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
                Tensor::from_vec(v, view.shape(), network.device())?
            }
            Dtype::F32 => {
                let v: Vec<f32> = view.data().chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
                Tensor::from_vec(v, view.shape(), network.device())?
            }
            other => return Err(GlmcError::format(path, format!("{}: unsupported dtype {other:?}", p.name))),
        };
        p.var.set(&t.to_dtype(dtype)?)?;
    }
    network.set_trained_epochs(epoch);
    Ok((network, info))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::longtail::ImageShape;

    #[test]
    fn round_trip_preserves_parameters() {
        for dtype in [DType::F32, DType::F64] {
            let mut net = Network::build("resnet8", ImageShape::new(3, 8, 8), 4, None, dtype, 3).unwrap();
            // perturb so the loaded values differ from a fresh init
            let w = net.classifier().weight().clone();
            w.set(&(w.as_tensor() * 2.0).unwrap()).unwrap();
            net.set_trained_epochs(7);
            let info = CheckpointInfo {
                train_counts: vec![10, 5, 3, 1],
                method: "glmc".into(),
                inference_head: HeadMode::LongTail,
                init_seed: 3,
            };
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("ck.safetensors");
            save(&net, &info, &path).unwrap();
            let (back, back_info) = load(&path).unwrap();
            assert_eq!(back_info, info);
            assert_eq!(back.trained_epochs(), 7);
            assert_eq!(back.dtype(), dtype);
            assert_eq!(back.param_hash().unwrap(), net.param_hash().unwrap());
        }
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.safetensors");
        fs::write(&path, b"not a checkpoint").unwrap();
        assert!(load(&path).is_err());
    }
}
