//! Versioned checkpoint files: parameters as safetensors, with the model
//! config, extractor identity and seed in the header metadata.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::config::ModelConfig;
use super::network::Mftr;
use super::params::{set_param, sorted_vars};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    pub config: ModelConfig,
    pub extractor: String,
    pub seed: u64,
}

pub fn save_checkpoint(model: &Mftr, extractor: &str, path: &Path) -> Result<()> {
    let vars = sorted_vars(model.var_map());
    let tensors: Vec<(String, candle_core::Tensor)> =
        vars.iter().map(|(name, var)| (name.clone(), var.as_tensor().clone())).collect();
    let mut meta = HashMap::new();
    meta.insert("version".to_string(), CHECKPOINT_VERSION.to_string());
    meta.insert("config".to_string(), serde_json::to_string(model.config())?);
    meta.insert("extractor".to_string(), extractor.to_string());
    meta.insert("seed".to_string(), model.seed().to_string());
    meta.insert("dtype".to_string(), format!("{:?}", model.dtype()));
    let bytes = safetensors::serialize(tensors.iter().map(|(n, t)| (n.as_str(), t)), Some(meta))
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// First dotted path at which two JSON documents differ.
fn first_difference(a: &Value, b: &Value, prefix: &str) -> Option<String> {
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            let mut keys: Vec<&String> = x.keys().chain(y.keys()).collect();
            keys.sort();
            keys.dedup();
            keys.into_iter().find_map(|k| {
                let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                match (x.get(k), y.get(k)) {
                    (Some(va), Some(vb)) => first_difference(va, vb, &path),
                    _ => Some(path),
                }
            })
        }
        _ if a == b => None,
        _ => Some(prefix.to_string()),
    }
}

/// Names the first config field that differs, if any.
pub fn config_difference(a: &ModelConfig, b: &ModelConfig) -> Option<String> {
    let va = serde_json::to_value(a).expect("config serializes");
    let vb = serde_json::to_value(b).expect("config serializes");
    first_difference(&va, &vb, "model")
}

fn parse_dtype(s: &str) -> Result<DType> {
    match s {
        "F32" => Ok(DType::F32),
        "F64" => Ok(DType::F64),
        "BF16" => Ok(DType::BF16),
        "F16" => Ok(DType::F16),
        other => Err(Error::Checkpoint(format!("unsupported dtype `{other}`"))),
    }
}

pub fn read_meta(bytes: &[u8], path: &Path) -> Result<(CheckpointMeta, DType)> {
    let (_, header) = safetensors::SafeTensors::read_metadata(bytes)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let meta = header.metadata().clone().unwrap_or_default();
    let field = |k: &str| {
        meta.get(k)
            .cloned()
            .ok_or_else(|| Error::Checkpoint(format!("{}: missing `{k}` in header", path.display())))
    };
    let version: u32 = field("version")?
        .parse()
        .map_err(|_| Error::Checkpoint("unreadable version".into()))?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: format version {version}, this build reads {CHECKPOINT_VERSION}",
            path.display()
        )));
    }
    let config: ModelConfig = serde_json::from_str(&field("config")?)?;
    let seed = field("seed")?
        .parse()
        .map_err(|_| Error::Checkpoint("unreadable seed".into()))?;
    let dtype = parse_dtype(&field("dtype")?)?;
    Ok((CheckpointMeta { version, config, extractor: field("extractor")?, seed }, dtype))
}

/// Loads a checkpoint. With `expected`, a differing config is rejected with
/// the name of the first mismatching field.
pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<(Mftr, CheckpointMeta)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (meta, dtype) = read_meta(&bytes, path)?;
    if let Some(field) = expected.and_then(|cfg| config_difference(cfg, &meta.config)) {
        return Err(Error::config(field, format!("does not match checkpoint {}", path.display())));
    }
    let model = Mftr::new(meta.config.clone(), meta.seed, dtype, Device::Cpu)?;
    let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
    let names: Vec<String> = sorted_vars(model.var_map()).into_iter().map(|(n, _)| n).collect();
    if names.len() != tensors.len() {
        return Err(Error::Checkpoint(format!(
            "{}: {} tensors stored, model has {} parameters",
            path.display(),
            tensors.len(),
            names.len()
        )));
    }
    for name in &names {
        let value = tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("{}: missing parameter `{name}`", path.display())))?;
        set_param(model.var_map(), name, value)?;
    }
    Ok((model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::get_param;

    #[test]
    fn round_trip_preserves_parameters() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.safetensors");
        let model = Mftr::new(ModelConfig::tiny(), 11, DType::F64, Device::Cpu).unwrap();
        save_checkpoint(&model, "stub", &path).unwrap();
        let (loaded, meta) = load_checkpoint(&path, Some(&ModelConfig::tiny())).unwrap();
        assert_eq!(meta.extractor, "stub");
        assert_eq!(meta.seed, 11);
        assert_eq!(loaded.dtype(), DType::F64);
        for (name, var) in sorted_vars(model.var_map()) {
            let a = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let b = get_param(loaded.var_map(), &name).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            assert_eq!(a, b, "{name}");
        }
    }

    #[test]
    fn mismatched_config_names_field() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.safetensors");
        let model = Mftr::new(ModelConfig::tiny(), 1, DType::F32, Device::Cpu).unwrap();
        save_checkpoint(&model, "stub", &path).unwrap();
        let other = ModelConfig { gamma: 0.7, ..ModelConfig::tiny() };
        match load_checkpoint(&path, Some(&other)) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "model.gamma"),
            other => panic!("unexpected {other:?}"),
        }
        let mut grid_change = ModelConfig::tiny();
        grid_change.grid.vp_cols = 3;
        match load_checkpoint(&path, Some(&grid_change)) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "model.grid.vp_cols"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
