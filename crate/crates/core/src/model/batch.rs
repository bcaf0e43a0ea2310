//! Stacking samples into model-ready tensors.

use candle_core::{DType, Device, Tensor};
use image::RgbImage;

use super::config::ModelConfig;
use super::extractor::DescriptorStore;
use crate::data::{FrameSource, TraceSample};
use crate::error::{Error, Result};
use crate::geometry::{viewport_mask, ViewportAnchor};

#[derive(Debug, Clone)]
pub struct Batch {
    /// `(B, t, 2)` yaw/pitch in radians.
    pub head_hist: Tensor,
    /// `(B, t, 2)` frame-normalized gaze.
    pub eye_hist: Tensor,
    /// `(B, t+T, descriptor_dim)` descriptors, or `(B, t+T, 3, H, W)`
    /// normalized frames when the backbone is trained with the model.
    pub visual: Tensor,
    /// `(B, T, 2)`.
    pub gt_heads: Tensor,
    /// `(B, T, n_rows, n_cols)` binary viewport masks.
    pub gt_masks: Tensor,
    pub gt_anchors: Vec<Vec<ViewportAnchor>>,
}

fn check_sample(s: &TraceSample, cfg: &ModelConfig) -> Result<()> {
    if s.history_len() != cfg.t || s.eye_hist.len() != cfg.t {
        return Err(Error::shape("sample history", cfg.t, s.history_len()));
    }
    if s.horizon() != cfg.horizon || s.gt_heads.len() != cfg.horizon {
        return Err(Error::shape("sample horizon", cfg.horizon, s.horizon()));
    }
    if s.frame_secs.len() != cfg.visual_len() {
        return Err(Error::shape("sample frames", cfg.visual_len(), s.frame_secs.len()));
    }
    Ok(())
}

fn pairs(rows: impl Iterator<Item = [f64; 2]>) -> Vec<f64> {
    rows.flat_map(|p| p.into_iter()).collect()
}

impl Batch {
    pub fn len(&self) -> usize {
        self.gt_anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gt_anchors.is_empty()
    }

    /// Batch whose visual input is looked up in a descriptor table.
    pub fn new(
        samples: &[&TraceSample],
        store: &DescriptorStore,
        cfg: &ModelConfig,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        if store.dim() != cfg.descriptor_dim {
            return Err(Error::shape("descriptor width", cfg.descriptor_dim, store.dim()));
        }
        let b = samples.len();
        let mut desc = Vec::with_capacity(b * cfg.visual_len() * cfg.descriptor_dim);
        for s in samples {
            check_sample(s, cfg)?;
            for &sec in &s.frame_secs {
                desc.extend_from_slice(store.get(&s.video_id, sec)?);
            }
        }
        let visual = Tensor::from_vec(desc, (b, cfg.visual_len(), cfg.descriptor_dim), device)?.to_dtype(dtype)?;
        Self::assemble(samples, visual, cfg, dtype, device)
    }

    /// Batch carrying normalized frames for an in-model backbone.
    pub fn with_frames(
        samples: &[&TraceSample],
        frames: &dyn FrameSource,
        cfg: &ModelConfig,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let (w, h) = (cfg.grid.frame_w, cfg.grid.frame_h);
        let mut data = Vec::with_capacity(samples.len() * cfg.visual_len() * 3 * w * h);
        for s in samples {
            check_sample(s, cfg)?;
            for &sec in &s.frame_secs {
                let frame = frames.frame(&s.video_id, sec)?;
                if frame.dimensions() != (w as u32, h as u32) {
                    return Err(Error::shape("frame size", format!("{w}x{h}"), format!("{:?}", frame.dimensions())));
                }
                data.extend(normalize_frame(&frame));
            }
        }
        let visual = Tensor::from_vec(data, (samples.len(), cfg.visual_len(), 3, h, w), device)?.to_dtype(dtype)?;
        Self::assemble(samples, visual, cfg, dtype, device)
    }

    fn assemble(samples: &[&TraceSample], visual: Tensor, cfg: &ModelConfig, dtype: DType, device: &Device) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let b = samples.len();
        let (t, horizon) = (cfg.t, cfg.horizon);
        let tensor = |v: Vec<f64>, shape: (usize, usize, usize)| -> Result<Tensor> {
            Ok(Tensor::from_vec(v, shape, device)?.to_dtype(dtype)?)
        };
        let head_hist = tensor(pairs(samples.iter().flat_map(|s| s.head_hist.iter().copied())), (b, t, 2))?;
        let eye_hist = tensor(pairs(samples.iter().flat_map(|s| s.eye_hist.iter().copied())), (b, t, 2))?;
        let gt_heads = tensor(pairs(samples.iter().flat_map(|s| s.gt_heads.iter().copied())), (b, horizon, 2))?;
        let grid = &cfg.grid;
        let mut masks = Vec::with_capacity(b * horizon * grid.n_tiles());
        for s in samples {
            for &a in &s.gt_anchors {
                masks.extend(viewport_mask(a, grid).values().iter().map(|&m| m as f64));
            }
        }
        let gt_masks = Tensor::from_vec(masks, (b, horizon, grid.n_rows, grid.n_cols), device)?.to_dtype(dtype)?;
        Ok(Self {
            head_hist,
            eye_hist,
            visual,
            gt_heads,
            gt_masks,
            gt_anchors: samples.iter().map(|s| s.gt_anchors.clone()).collect(),
        })
    }
}

/// ImageNet channel normalization, CHW order.
pub fn normalize_frame(frame: &RgbImage) -> Vec<f32> {
    const MEAN: [f32; 3] = [0.485, 0.456, 0.406];
    const STD: [f32; 3] = [0.229, 0.224, 0.225];
    let (w, h) = (frame.width() as usize, frame.height() as usize);
    let mut data = vec![0f32; 3 * w * h];
    for (x, y, p) in frame.enumerate_pixels() {
        for c in 0..3 {
            data[c * w * h + y as usize * w + x as usize] = (p.0[c] as f32 / 255.0 - MEAN[c]) / STD[c];
        }
    }
    data
}
