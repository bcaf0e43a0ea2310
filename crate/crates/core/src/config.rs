//! Run configuration file (TOML).
//!
//! ```toml
//! seed = 7                # optional; derives the synth, split and train seeds
//!
//! [grid]                  # tile grid, shared by data and model
//! [model]                 # network shape, loss weights, ablation flags
//! [train]                 # optimizer and loop settings
//! [split]                 # train/val/test fractions and mode
//! [synth]                 # synthetic generator, used when no traces are given
//! [data]                  # trace/frame paths and the frame extractor
//! ```
//!
//! Every section is optional and defaults to the published settings.
//! Unknown keys are rejected. Relative paths resolve against the directory
//! of the config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{SplitSpec, SynthConfig};
use crate::error::{Error, Result};
use crate::geometry::TileGrid;
use crate::model::ModelConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorKind {
    /// Weight-free hashed projection; no files needed.
    #[default]
    Hash,
    /// ImageNet MobileNet-V2 from `data.weights` (torchvision layout, safetensors).
    MobilenetV2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// JSON-lines trace file; synthetic data is generated when absent.
    pub traces: Option<PathBuf>,
    /// Frame root laid out as `<root>/<video_id>/<t_sec>.png`.
    pub frames: Option<PathBuf>,
    pub extractor: ExtractorKind,
    pub weights: Option<PathBuf>,
    /// Descriptor cache file, keyed by extractor identity.
    pub descriptor_cache: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfigFile {
    pub seed: Option<u64>,
    pub grid: TileGrid,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub split: SplitSpec,
    pub synth: SynthConfig,
    pub data: DataSection,
}

/// Per-component seed: the first eight bytes of `sha256("<seed>:<component>")`.
pub fn derive_seed(seed: u64, component: &str) -> u64 {
    let digest = Sha256::digest(format!("{seed}:{component}").as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("eight bytes"))
}

fn unknown_field(msg: &str) -> Option<String> {
    let start = msg.find("unknown field `")? + "unknown field `".len();
    let end = msg[start..].find('`')?;
    Some(msg[start..start + end].to_string())
}

impl RunConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let raw: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config("config", e.message().to_string()))?;
        if raw.get("model").and_then(|m| m.get("grid")).is_some() {
            return Err(Error::config("model.grid", "set the tile grid in the [grid] section"));
        }
        let mut cfg: Self = toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            let field = unknown_field(&msg).unwrap_or_else(|| "config".into());
            Error::config(field, msg)
        })?;
        cfg.model.grid = cfg.grid;
        if let Some(seed) = cfg.seed {
            cfg.apply_seed(seed);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut Option<PathBuf>| {
            if let Some(p) = p.as_mut().filter(|p| p.is_relative()) {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.data.traces);
        resolve(&mut cfg.data.frames);
        resolve(&mut cfg.data.weights);
        resolve(&mut cfg.data.descriptor_cache);
        Ok(cfg)
    }

    /// Sets the synth, split and train seeds from one run seed.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
        self.synth.seed = derive_seed(seed, "synth");
        self.split.seed = derive_seed(seed, "split");
        self.train.seed = derive_seed(seed, "train");
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.model.validate()?;
        self.split.validate()?;
        self.synth.validate()?;
        if self.data.extractor == ExtractorKind::MobilenetV2 && self.data.weights.is_none() {
            return Err(Error::config("data.weights", "required by the mobilenet_v2 extractor"));
        }
        if self.data.traces.is_some() != self.data.frames.is_some() {
            return Err(Error::config("data.frames", "data.traces and data.frames must be given together"));
        }
        self.train_config().validate()
    }

    /// Training configuration with the model and split sections attached.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            model: self.model.clone(),
            split: self.split,
            ..self.train.clone()
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        let mut value = toml::Value::try_from(self).map_err(|e| Error::config("config", e.to_string()))?;
        if let Some(model) = value.get_mut("model").and_then(|m| m.as_table_mut()) {
            model.remove("grid");
        }
        toml::to_string_pretty(&value).map_err(|e| Error::config("config", e.to_string()))
    }
}
