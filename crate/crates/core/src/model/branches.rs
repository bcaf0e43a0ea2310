//! The five MFTR blocks: temporal branch, visual branch, temporal-visual
//! fusion, position prediction head and tile classification head.
//!
//! All tensors are batch-major: `(B, sequence, channels)`.

use candle_core::{Tensor, D};

use super::config::{FusionTemporalMode, ModelConfig};
use super::layers::{sigmoid, sinusoidal_positions, EncoderStack, Linear, Lstm, Mlp};
use super::params::ParamBuilder;
use crate::error::{Error, Result};

fn check_finite(x: &Tensor, context: &'static str) -> Result<()> {
    let total = x.to_dtype(candle_core::DType::F64)?.abs()?.sum_all()?.to_scalar::<f64>()?;
    if !total.is_finite() {
        return Err(Error::Data(format!("non-finite values in {context}")));
    }
    Ok(())
}

/// Head and eye histories → fused temporal features `(B, t, d_model)`.
///
/// Each modality is lifted by a dense layer, encoded by its own stacked
/// LSTM, the two hidden sequences are concatenated along channels and the
/// result is refined by the temporal transformer.
#[derive(Debug, Clone)]
pub struct TemporalBranch {
    head_fc: Linear,
    eye_fc: Linear,
    head_lstm: Lstm,
    eye_lstm: Lstm,
    transformer: EncoderStack,
    t: usize,
    skip_transformer: bool,
}

impl TemporalBranch {
    pub fn new(pb: &ParamBuilder, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            head_fc: Linear::new(&pb.pp("head_fc"), 2, cfg.c_head, true)?,
            eye_fc: Linear::new(&pb.pp("eye_fc"), 2, cfg.c_eye, true)?,
            head_lstm: Lstm::new(&pb.pp("head_lstm"), cfg.c_head, cfg.c_head, cfg.recurrent_layers)?,
            eye_lstm: Lstm::new(&pb.pp("eye_lstm"), cfg.c_eye, cfg.c_eye, cfg.recurrent_layers)?,
            transformer: EncoderStack::new(
                &pb.pp("transformer"),
                cfg.n_encoder_layers,
                cfg.d_model,
                cfg.n_attention_heads,
                cfg.ffn_hidden,
            )?,
            t: cfg.t,
            skip_transformer: cfg.ablation.no_temporal_transformer,
        })
    }

    /// Concatenated recurrent features before the transformer.
    pub fn recurrent_features(&self, head_hist: &Tensor, eye_hist: &Tensor) -> Result<Tensor> {
        for (x, what) in [(head_hist, "head history"), (eye_hist, "eye history")] {
            let (_, l, c) = x.dims3()?;
            if l != self.t || c != 2 {
                return Err(Error::shape(what, format!("(B, {}, 2)", self.t), format!("{:?}", x.dims())));
            }
            check_finite(x, what)?;
        }
        let h = self.head_lstm.forward(&self.head_fc.forward(head_hist)?)?;
        let e = self.eye_lstm.forward(&self.eye_fc.forward(eye_hist)?)?;
        Ok(Tensor::cat(&[h, e], D::Minus1)?)
    }

    pub fn forward(&self, head_hist: &Tensor, eye_hist: &Tensor) -> Result<Tensor> {
        let tf = self.recurrent_features(head_hist, eye_hist)?;
        if self.skip_transformer {
            Ok(tf)
        } else {
            self.transformer.forward(&tf)
        }
    }
}

/// Per-frame descriptors `(B, t+T, descriptor_dim)` → visual features
/// `(B, t+T, d_model)`: dense reduction, sinusoidal sequence positions,
/// visual transformer.
#[derive(Debug, Clone)]
pub struct VisualBranch {
    reduce: Linear,
    transformer: EncoderStack,
    len: usize,
    descriptor_dim: usize,
    d_model: usize,
    skip_transformer: bool,
}

impl VisualBranch {
    pub fn new(pb: &ParamBuilder, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            reduce: Linear::new(&pb.pp("reduce"), cfg.descriptor_dim, cfg.d_model, true)?,
            transformer: EncoderStack::new(
                &pb.pp("transformer"),
                cfg.n_encoder_layers,
                cfg.d_model,
                cfg.n_attention_heads,
                cfg.ffn_hidden,
            )?,
            len: cfg.visual_len(),
            descriptor_dim: cfg.descriptor_dim,
            d_model: cfg.d_model,
            skip_transformer: cfg.ablation.no_visual_transformer,
        })
    }

    /// Reduced descriptors before position embeddings.
    pub fn reduced(&self, descriptors: &Tensor) -> Result<Tensor> {
        let (_, l, c) = descriptors.dims3()?;
        if l != self.len || c != self.descriptor_dim {
            return Err(Error::shape(
                "frame descriptors",
                format!("(B, {}, {})", self.len, self.descriptor_dim),
                format!("{:?}", descriptors.dims()),
            ));
        }
        self.reduce.forward(descriptors)
    }

    /// Reduced descriptors plus sequence positions (the transformer input).
    pub fn embedded(&self, descriptors: &Tensor) -> Result<Tensor> {
        let reduced = self.reduced(descriptors)?;
        let pe = sinusoidal_positions(self.len, self.d_model, reduced.dtype(), reduced.device())?;
        Ok(reduced.broadcast_add(&pe)?)
    }

    pub fn forward(&self, descriptors: &Tensor) -> Result<Tensor> {
        let x = self.embedded(descriptors)?;
        if self.skip_transformer {
            Ok(x)
        } else {
            self.transformer.forward(&x)
        }
    }
}

/// Joint temporal-visual transformer. Returns the outputs at the positions of
/// the last `T` visual tokens, `(B, T, d_model)`.
#[derive(Debug, Clone)]
pub struct Fusion {
    type_embeddings: Tensor,
    transformer: EncoderStack,
    t: usize,
    horizon: usize,
    d_model: usize,
    mode: FusionTemporalMode,
    temporal_positions: bool,
    disabled: bool,
}

impl Fusion {
    pub fn new(pb: &ParamBuilder, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            type_embeddings: pb.normal("type_embeddings", &[2, cfg.d_model], 0.02)?,
            transformer: EncoderStack::new(
                &pb.pp("transformer"),
                cfg.n_encoder_layers,
                cfg.d_model,
                cfg.n_attention_heads,
                cfg.ffn_hidden,
            )?,
            t: cfg.t,
            horizon: cfg.horizon,
            d_model: cfg.d_model,
            mode: cfg.fusion_temporal_mode,
            temporal_positions: cfg.fusion_temporal_positions,
            disabled: cfg.ablation.no_fusion,
        })
    }

    /// Token sequence fed to the fusion transformer: temporal tokens (or their
    /// sum) then all visual tokens, each with its modality embedding.
    pub fn joint_input(&self, tf: &Tensor, v: &Tensor) -> Result<Tensor> {
        let temporal_type = self.type_embeddings.narrow(0, 0, 1)?;
        let visual_type = self.type_embeddings.narrow(0, 1, 1)?;
        let temporal = match self.mode {
            FusionTemporalMode::Sequence => {
                let mut x = tf.broadcast_add(&temporal_type)?;
                if self.temporal_positions {
                    let pe = sinusoidal_positions(self.t, self.d_model, tf.dtype(), tf.device())?;
                    x = x.broadcast_add(&pe)?;
                }
                x
            }
            FusionTemporalMode::Sum => tf.sum_keepdim(1)?.broadcast_add(&temporal_type)?,
        };
        let visual = v.broadcast_add(&visual_type)?;
        Ok(Tensor::cat(&[temporal, visual], 1)?)
    }

    pub fn forward(&self, tf: &Tensor, v: &Tensor) -> Result<Tensor> {
        let (b, lt, ct) = tf.dims3()?;
        let (bv, lv, cv) = v.dims3()?;
        if b != bv || lt != self.t || lv != self.t + self.horizon || ct != self.d_model || cv != self.d_model {
            return Err(Error::shape(
                "fusion inputs",
                format!("tf (B, {}, {d}), v (B, {}, {d})", self.t, self.t + self.horizon, d = self.d_model),
                format!("tf {:?}, v {:?}", tf.dims(), v.dims()),
            ));
        }
        if self.disabled {
            // Without fusion: future visual tokens plus the mean temporal feature.
            let future = v.narrow(1, self.t, self.horizon)?;
            return Ok(future.broadcast_add(&tf.mean_keepdim(1)?)?);
        }
        let joint = self.joint_input(tf, v)?;
        let out = self.transformer.forward(&joint)?;
        let len = out.dim(1)?;
        Ok(out.narrow(1, len - self.horizon, self.horizon)?)
    }
}

/// Per-step MLP `d_model → h1 → h2 → 2` on the temporal features; the last
/// `T` steps are the predicted head positions `(B, T, 2)`.
#[derive(Debug, Clone)]
pub struct PositionHead {
    mlp: Mlp,
    t: usize,
    horizon: usize,
}

impl PositionHead {
    pub fn new(pb: &ParamBuilder, cfg: &ModelConfig) -> Result<Self> {
        if cfg.horizon > cfg.t {
            return Err(Error::config("model.horizon", "horizon T must not exceed history t"));
        }
        let [h1, h2] = cfg.pos_head_hidden;
        Ok(Self {
            mlp: Mlp::new(&pb.pp("mlp"), &[cfg.d_model, h1, h2, 2])?,
            t: cfg.t,
            horizon: cfg.horizon,
        })
    }

    /// MLP output for all `t` steps.
    pub fn mlp_all(&self, tf: &Tensor) -> Result<Tensor> {
        self.mlp.forward(tf)
    }

    pub fn forward(&self, tf: &Tensor) -> Result<Tensor> {
        let all = self.mlp.forward(tf)?;
        Ok(all.narrow(1, self.t - self.horizon, self.horizon)?)
    }
}

/// Per-step MLP `d_model → hidden → n_rows·n_cols` with a sigmoid, reshaped
/// row-major to score maps `(B, T, n_rows, n_cols)`.
#[derive(Debug, Clone)]
pub struct TileHead {
    mlp: Mlp,
    rows: usize,
    cols: usize,
}

impl TileHead {
    /// The output bias starts at the logit of the viewport's share of the
    /// grid, so initial scores match the base rate of positive tiles.
    pub fn new(pb: &ParamBuilder, cfg: &ModelConfig) -> Result<Self> {
        let prior = cfg.grid.viewport_tiles() as f64 / cfg.grid.n_tiles() as f64;
        let widths = [cfg.d_model, cfg.tile_head_hidden, cfg.grid.n_tiles()];
        Ok(Self {
            mlp: Mlp::with_output_bias(&pb.pp("mlp"), &widths, Some((prior / (1.0 - prior)).ln()))?,
            rows: cfg.grid.n_rows,
            cols: cfg.grid.n_cols,
        })
    }

    pub fn logits(&self, vp: &Tensor) -> Result<Tensor> {
        let (b, t, _) = vp.dims3()?;
        Ok(self.mlp.forward(vp)?.reshape((b, t, self.rows, self.cols))?)
    }

    pub fn forward(&self, vp: &Tensor) -> Result<Tensor> {
        sigmoid(&self.logits(vp)?)
    }
}
