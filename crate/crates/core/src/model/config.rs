use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::TileGrid;

/// How the temporal features enter the fusion transformer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FusionTemporalMode {
    /// `t` temporal tokens followed by `t + T` visual tokens.
    #[default]
    Sequence,
    /// A single temporal token holding the sum of all `t` temporal features.
    Sum,
}

/// Component removals used by the ablation suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    pub no_temporal_transformer: bool,
    pub no_position_head: bool,
    pub no_visual_transformer: bool,
    pub no_fusion: bool,
    pub no_tile_head: bool,
}

impl Ablation {
    pub fn any(&self) -> bool {
        self.no_temporal_transformer
            || self.no_position_head
            || self.no_visual_transformer
            || self.no_fusion
            || self.no_tile_head
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// History length in seconds.
    pub t: usize,
    /// Prediction horizon in seconds.
    pub horizon: usize,
    pub d_model: usize,
    /// Width of the head-motion stream (FC output and recurrent hidden size).
    pub c_head: usize,
    /// Width of the eye-motion stream.
    pub c_eye: usize,
    pub recurrent_layers: usize,
    pub recurrent_hidden: usize,
    /// Encoder layers in each of the temporal, visual and fusion transformers.
    pub n_encoder_layers: usize,
    pub n_attention_heads: usize,
    pub ffn_hidden: usize,
    pub pos_head_hidden: [usize; 2],
    pub tile_head_hidden: usize,
    /// Width of the per-frame visual descriptor.
    pub descriptor_dim: usize,
    /// Tile interest threshold; a tile is interesting when its score exceeds it.
    pub gamma: f64,
    pub alpha: f64,
    pub beta: f64,
    pub grid: TileGrid,
    pub fusion_temporal_mode: FusionTemporalMode,
    /// Add sinusoidal positions to temporal tokens in the fusion input.
    pub fusion_temporal_positions: bool,
    /// Train the CNN backbone together with the rest of the model.
    pub finetune_backbone: bool,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            t: 5,
            horizon: 5,
            d_model: 512,
            c_head: 256,
            c_eye: 256,
            recurrent_layers: 3,
            recurrent_hidden: 256,
            n_encoder_layers: 6,
            n_attention_heads: 8,
            ffn_hidden: 2048,
            pos_head_hidden: [128, 64],
            tile_head_hidden: 256,
            descriptor_dim: 1000,
            gamma: 0.55,
            alpha: 0.35,
            beta: 0.65,
            grid: TileGrid::default(),
            fusion_temporal_mode: FusionTemporalMode::Sequence,
            fusion_temporal_positions: true,
            finetune_backbone: false,
            ablation: Ablation::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        let positive = [
            ("model.t", self.t),
            ("model.horizon", self.horizon),
            ("model.d_model", self.d_model),
            ("model.c_head", self.c_head),
            ("model.c_eye", self.c_eye),
            ("model.recurrent_layers", self.recurrent_layers),
            ("model.recurrent_hidden", self.recurrent_hidden),
            ("model.n_attention_heads", self.n_attention_heads),
            ("model.ffn_hidden", self.ffn_hidden),
            ("model.tile_head_hidden", self.tile_head_hidden),
            ("model.descriptor_dim", self.descriptor_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(name, "must be positive"));
            }
        }
        if self.pos_head_hidden.contains(&0) {
            return Err(Error::config("model.pos_head_hidden", "must be positive"));
        }
        if self.horizon > self.t {
            return Err(Error::config("model.horizon", "horizon T must not exceed history t"));
        }
        if self.c_head + self.c_eye != self.d_model {
            return Err(Error::config("model.c_head", "c_head + c_eye must equal d_model"));
        }
        if self.recurrent_hidden != self.c_head || self.recurrent_hidden != self.c_eye {
            return Err(Error::config(
                "model.recurrent_hidden",
                "recurrent outputs keep the stream width, so recurrent_hidden must equal c_head and c_eye",
            ));
        }
        if self.d_model % self.n_attention_heads != 0 {
            return Err(Error::config("model.n_attention_heads", "must divide d_model"));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::config("model.gamma", "must be in (0, 1)"));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::config("model.alpha", "must be non-negative"));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::config("model.beta", "must be non-negative"));
        }
        Ok(())
    }

    /// Length of the visual sequence, `t + T`.
    pub fn visual_len(&self) -> usize {
        self.t + self.horizon
    }

    /// Tiny float64-friendly shape used by gradient checks and fast tests.
    pub fn tiny() -> Self {
        Self {
            t: 2,
            horizon: 2,
            d_model: 8,
            c_head: 4,
            c_eye: 4,
            recurrent_layers: 2,
            recurrent_hidden: 4,
            n_encoder_layers: 1,
            n_attention_heads: 2,
            ffn_hidden: 16,
            pos_head_hidden: [6, 5],
            tile_head_hidden: 7,
            descriptor_dim: 6,
            grid: TileGrid::new(2, 4, 1, 2, 8, 4).expect("valid tiny grid"),
            ..Self::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.gamma, 0.55);
        assert_eq!((cfg.alpha, cfg.beta), (0.35, 0.65));
        assert_eq!(cfg.c_head + cfg.c_eye, 512);
        ModelConfig::tiny().validate().unwrap();
    }

    #[test]
    fn invariants_enforced() {
        let bad = ModelConfig { horizon: 6, ..Default::default() };
        assert!(matches!(bad.validate(), Err(Error::Config { field, .. }) if field == "model.horizon"));
        let bad = ModelConfig { n_attention_heads: 7, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = ModelConfig { c_eye: 128, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = ModelConfig { gamma: 1.0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = ModelConfig { alpha: -0.1, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = serde_json::from_str::<ModelConfig>(r#"{"d_modle": 8}"#).unwrap_err();
        assert!(err.to_string().contains("d_modle"));
    }
}
