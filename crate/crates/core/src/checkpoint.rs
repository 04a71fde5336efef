//! Single-file checkpoint container: a named-tensor archive (safetensors
//! layout) whose metadata carries the serialized configs. Round-trips are
//! bit-exact.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use candle_nn::VarMap;
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};

fn tensor_bytes(t: &Tensor) -> Result<(Dtype, Vec<u8>)> {
    let t = t.contiguous()?;
    match t.dtype() {
        DType::F32 => {
            let v = t.flatten_all()?.to_vec1::<f32>()?;
            let mut bytes = Vec::with_capacity(v.len() * 4);
            for x in v {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
            Ok((Dtype::F32, bytes))
        }
        DType::F64 => {
            let v = t.flatten_all()?.to_vec1::<f64>()?;
            let mut bytes = Vec::with_capacity(v.len() * 8);
            for x in v {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
            Ok((Dtype::F64, bytes))
        }
        other => Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    }
}

fn tensor_from_bytes(dtype: Dtype, shape: &[usize], bytes: &[u8], dev: &Device) -> Result<Tensor> {
    match dtype {
        Dtype::F32 => {
            let v: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Ok(Tensor::from_vec(v, shape, dev)?)
        }
        Dtype::F64 => {
            let v: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Ok(Tensor::from_vec(v, shape, dev)?)
        }
        other => Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    }
}

/// Writes named tensors plus string metadata as one file.
pub fn save_tensors(
    path: &Path,
    tensors: &[(String, Tensor)],
    metadata: &BTreeMap<String, String>,
) -> Result<()> {
    let mut raw: Vec<(String, Dtype, Vec<usize>, Vec<u8>)> = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        let (dt, bytes) = tensor_bytes(t)?;
        raw.push((name.clone(), dt, t.dims().to_vec(), bytes));
    }
    let views: Vec<(&str, TensorView)> = raw
        .iter()
        .map(|(name, dt, shape, bytes)| {
            Ok((
                name.as_str(),
                TensorView::new(*dt, shape.clone(), bytes)
                    .map_err(|e| Error::Checkpoint(e.to_string()))?,
            ))
        })
        .collect::<Result<_>>()?;
    let meta: HashMap<String, String> = metadata
        .iter()
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    let data = safetensors::serialize(views, Some(meta))
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, data)?;
    Ok(())
}

/// Reads back all tensors and metadata.
pub fn load_tensors(path: &Path, dev: &Device) -> Result<(HashMap<String, Tensor>, BTreeMap<String, String>)> {
    let data = std::fs::read(path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let st = SafeTensors::deserialize(&data).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = HashMap::new();
    for (name, view) in st.tensors() {
        let t = tensor_from_bytes(view.dtype(), view.shape(), view.data(), dev)?;
        out.insert(name.to_string(), t);
    }
    let (_, meta) = SafeTensors::read_metadata(&data).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let metadata: BTreeMap<String, String> = meta
        .metadata()
        .as_ref()
        .map(|m| m.iter().map(|(k, v)| (k.clone(), v.clone())).collect())
        .unwrap_or_default();
    Ok((out, metadata))
}

/// Snapshot of a `VarMap` (sorted names) with metadata.
pub fn save_varmap(path: &Path, varmap: &VarMap, metadata: &BTreeMap<String, String>) -> Result<()> {
    let data = varmap.data().lock().unwrap();
    let mut names: Vec<&String> = data.keys().collect();
    names.sort();
    let tensors: Vec<(String, Tensor)> = names
        .into_iter()
        .map(|n| (n.clone(), data[n].as_tensor().clone()))
        .collect();
    drop(data);
    save_tensors(path, &tensors, metadata)
}

/// Fills an already-constructed `VarMap` from a checkpoint; every var must be
/// present with a matching shape.
pub fn load_varmap(path: &Path, varmap: &VarMap) -> Result<BTreeMap<String, String>> {
    let data_guard = varmap.data().lock().unwrap();
    let dev = data_guard
        .values()
        .next()
        .map(|v| v.device().clone())
        .unwrap_or(Device::Cpu);
    drop(data_guard);
    let (tensors, metadata) = load_tensors(path, &dev)?;
    let data = varmap.data().lock().unwrap();
    for (name, var) in data.iter() {
        let t = tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
        var.set(&t.to_dtype(var.dtype())?)
            .map_err(|e| Error::Checkpoint(format!("`{name}`: {e}")))?;
    }
    Ok(metadata)
}

pub fn read_metadata(path: &Path) -> Result<BTreeMap<String, String>> {
    let data = std::fs::read(path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let (_, meta) = SafeTensors::read_metadata(&data).map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok(meta
        .metadata()
        .as_ref()
        .map(|m| m.iter().map(|(k, v)| (k.clone(), v.clone())).collect())
        .unwrap_or_default())
}

/// Loads a full model checkpoint (config in metadata key `model_config`).
/// Optimizer tensors in the file are ignored.
pub fn load_model(
    path: &Path,
    dtype: DType,
    dev: &Device,
) -> Result<(crate::model::ReidModel, VarMap, BTreeMap<String, String>)> {
    let meta = read_metadata(path)?;
    let cfg_json = meta
        .get("model_config")
        .ok_or_else(|| Error::Checkpoint("missing `model_config` metadata".into()))?;
    let cfg: crate::model::ModelConfig =
        serde_json::from_str(cfg_json).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let varmap = VarMap::new();
    let vb = candle_nn::VarBuilder::from_varmap(&varmap, dtype, dev);
    let model = crate::model::ReidModel::new(cfg, vb)?;
    let meta = load_varmap(path, &varmap)?;
    Ok((model, varmap, meta))
}

/// Loads a standalone backbone checkpoint (config in metadata key
/// `backbone_config`), returning its config and a filled `VarMap`.
pub fn load_backbone(path: &Path, dtype: DType, dev: &Device) -> Result<(BackboneConfig, VarMap)> {
    let meta = read_metadata(path)?;
    let cfg_json = meta
        .get("backbone_config")
        .ok_or_else(|| Error::Checkpoint("missing `backbone_config` metadata".into()))?;
    let cfg: BackboneConfig =
        serde_json::from_str(cfg_json).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let varmap = VarMap::new();
    let vb = candle_nn::VarBuilder::from_varmap(&varmap, dtype, dev);
    let _backbone = crate::backbone::Backbone::new(cfg.clone(), vb)?;
    load_varmap(path, &varmap)?;
    Ok((cfg, varmap))
}
