//! The assembled predictor.

use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{VarBuilder, VarMap};

use super::batch::Batch;
use super::branches::{Fusion, PositionHead, TemporalBranch, TileHead, VisualBranch};
use super::config::ModelConfig;
use super::extractor::MobileNetV2;
use super::loss::{loss_cls, loss_pos, total_loss};
use super::params::{set_param, sorted_vars, ParamBuilder};
use crate::error::{Error, Result};
use crate::geometry::{nearest_viewport, select_viewport, HeadPosition, TileGrid, TileMask, ViewportAnchor};

#[derive(Debug, Clone)]
pub struct ModelOutput {
    /// `(B, T, 2)` predicted yaw/pitch.
    pub head: Tensor,
    /// `(B, T, n_rows, n_cols)` tile scores in `[0, 1]`.
    pub scores: Tensor,
}

#[derive(Debug, Clone)]
pub struct Losses {
    pub total: Tensor,
    pub pos: Tensor,
    pub cls: Tensor,
}

/// Host-side predictions for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub heads: Vec<Vec<[f64; 2]>>,
    /// Row-major score maps, `[sample][step][tile]`.
    pub scores: Vec<Vec<Vec<f64>>>,
    pub anchors: Vec<Vec<ViewportAnchor>>,
}

pub struct Mftr {
    cfg: ModelConfig,
    seed: u64,
    map: VarMap,
    dtype: DType,
    device: Device,
    backbone: Option<MobileNetV2>,
    temporal: TemporalBranch,
    visual: VisualBranch,
    fusion: Fusion,
    position: PositionHead,
    tile: TileHead,
}

impl std::fmt::Debug for Mftr {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Mftr")
            .field("cfg", &self.cfg)
            .field("seed", &self.seed)
            .field("dtype", &self.dtype)
            .finish_non_exhaustive()
    }
}

impl Mftr {
    pub fn new(cfg: ModelConfig, seed: u64, dtype: DType, device: Device) -> Result<Self> {
        cfg.validate()?;
        let map = VarMap::new();
        let pb = ParamBuilder::new(map.clone(), seed, dtype, device.clone());
        let temporal = TemporalBranch::new(&pb.pp("temporal"), &cfg)?;
        let visual = VisualBranch::new(&pb.pp("visual"), &cfg)?;
        let fusion = Fusion::new(&pb.pp("fusion"), &cfg)?;
        let position = PositionHead::new(&pb.pp("position_head"), &cfg)?;
        let tile = TileHead::new(&pb.pp("tile_head"), &cfg)?;
        let backbone = if cfg.finetune_backbone {
            if cfg.descriptor_dim != 1000 {
                return Err(Error::config("model.descriptor_dim", "the in-model backbone produces 1000 features"));
            }
            let vb = VarBuilder::from_varmap(&map, dtype, &device).pp("backbone");
            Some(MobileNetV2::new(vb, cfg.grid, "mobilenet_v2:finetuned".into())?)
        } else {
            None
        };
        Ok(Self {
            cfg,
            seed,
            map,
            dtype,
            device,
            backbone,
            temporal,
            visual,
            fusion,
            position,
            tile,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn var_map(&self) -> &VarMap {
        &self.map
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn has_backbone(&self) -> bool {
        self.backbone.is_some()
    }

    /// Parameters the optimizer updates; batch-norm running statistics of
    /// the backbone are excluded.
    pub fn trainable_vars(&self) -> Vec<Var> {
        sorted_vars(&self.map)
            .into_iter()
            .filter(|(name, _)| !name.ends_with("running_mean") && !name.ends_with("running_var"))
            .map(|(_, v)| v)
            .collect()
    }

    /// Copies torchvision-layout MobileNet-V2 weights into the in-model backbone.
    pub fn load_backbone(&self, path: &Path) -> Result<()> {
        if self.backbone.is_none() {
            return Err(Error::config("model.finetune_backbone", "model has no trainable backbone"));
        }
        let tensors = candle_core::safetensors::load(path, &self.device)?;
        for (name, value) in tensors {
            set_param(&self.map, &format!("backbone.{name}"), &value)?;
        }
        Ok(())
    }

    /// Per-frame descriptors `(B, t+T, D)` from the batch's visual input.
    fn descriptors(&self, visual: &Tensor) -> Result<Tensor> {
        match (&self.backbone, visual.rank()) {
            (None, 3) => Ok(visual.clone()),
            (Some(net), 5) => {
                let (b, l, c, h, w) = visual.dims5()?;
                let feats = net.forward(&visual.reshape((b * l, c, h, w))?)?;
                Ok(feats.reshape((b, l, feats.dim(1)?))?)
            }
            (None, _) => Err(Error::shape("visual input", "(B, t+T, D) descriptors", format!("{:?}", visual.dims()))),
            (Some(_), _) => Err(Error::shape("visual input", "(B, t+T, 3, H, W) frames", format!("{:?}", visual.dims()))),
        }
    }

    pub fn temporal_features(&self, batch: &Batch) -> Result<Tensor> {
        self.temporal.forward(&batch.head_hist, &batch.eye_hist)
    }

    pub fn visual_features(&self, batch: &Batch) -> Result<Tensor> {
        self.visual.forward(&self.descriptors(&batch.visual)?)
    }

    pub fn forward(&self, batch: &Batch) -> Result<ModelOutput> {
        let tf = self.temporal_features(batch)?;
        let v = self.visual_features(batch)?;
        let vp = self.fusion.forward(&tf, &v)?;
        Ok(ModelOutput {
            head: self.position.forward(&tf)?,
            scores: self.tile.forward(&vp)?,
        })
    }

    pub fn losses(&self, out: &ModelOutput, batch: &Batch) -> Result<Losses> {
        let pos = loss_pos(&out.head, &batch.gt_heads)?;
        let cls = loss_cls(&out.scores, &batch.gt_masks)?;
        let total = total_loss(&pos, &cls, &self.cfg)?;
        Ok(Losses { total, pos, cls })
    }

    pub fn predict(&self, batch: &Batch) -> Result<Prediction> {
        let out = self.forward(batch)?;
        self.decode(&out)
    }

    /// Converts raw outputs to anchors: thresholded score maps normally,
    /// nearest viewport of the predicted head position without a tile head.
    pub fn decode(&self, out: &ModelOutput) -> Result<Prediction> {
        let (b, horizon, rows, cols) = out.scores.dims4()?;
        let n = rows * cols;
        let flat_scores = out.scores.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        let flat_heads = out.head.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        let grid = &self.cfg.grid;
        let mut pred = Prediction {
            heads: Vec::with_capacity(b),
            scores: Vec::with_capacity(b),
            anchors: Vec::with_capacity(b),
        };
        for i in 0..b {
            let mut heads = Vec::with_capacity(horizon);
            let mut maps = Vec::with_capacity(horizon);
            let mut anchors = Vec::with_capacity(horizon);
            for k in 0..horizon {
                let h = [flat_heads[(i * horizon + k) * 2], flat_heads[(i * horizon + k) * 2 + 1]];
                let map = flat_scores[(i * horizon + k) * n..(i * horizon + k + 1) * n].to_vec();
                let anchor = if self.cfg.ablation.no_tile_head {
                    nearest_viewport(HeadPosition::wrapped(h[0], h[1]), grid)
                } else {
                    select_viewport(&threshold(&map, grid, self.cfg.gamma)?, grid)
                };
                heads.push(h);
                maps.push(map);
                anchors.push(anchor);
            }
            pred.heads.push(heads);
            pred.scores.push(maps);
            pred.anchors.push(anchors);
        }
        Ok(pred)
    }
}

/// Tiles whose score strictly exceeds `gamma`.
pub fn threshold(scores: &[f64], grid: &TileGrid, gamma: f64) -> Result<TileMask> {
    TileMask::from_values(grid, scores.iter().map(|&s| (s > gamma) as u8).collect())
}

/// Viewport chosen from one score map.
pub fn anchor_from_scores(scores: &[f64], grid: &TileGrid, gamma: f64) -> Result<ViewportAnchor> {
    Ok(select_viewport(&threshold(scores, grid, gamma)?, grid))
}
