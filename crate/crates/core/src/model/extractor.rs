//! Per-frame visual descriptors.
//!
//! Two extractors share the [`FrameExtractor`] interface:
//! [`HashProjection`] is a weight-free, deterministic stand-in used in tests
//! and on the synthetic data; [`MobileNetV2`] runs the ImageNet classifier
//! from a safetensors file in torchvision layout and returns its 1000 logits.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Module, ModuleT, Tensor};
use candle_nn::{BatchNorm, Conv2d, Conv2dConfig, VarBuilder};
use image::RgbImage;
use sha2::{Digest, Sha256};

use super::batch::normalize_frame;
use crate::data::{FrameSource, TraceSample};
use crate::error::{Error, Result};
use crate::geometry::TileGrid;

pub trait FrameExtractor {
    /// Stable identifier stored alongside checkpoints and descriptor caches.
    fn identity(&self) -> String;

    fn dim(&self) -> usize;

    fn extract(&self, frame: &RgbImage) -> Result<Vec<f32>>;
}

fn check_frame(frame: &RgbImage, grid: &TileGrid) -> Result<()> {
    let want = (grid.frame_w as u32, grid.frame_h as u32);
    if frame.dimensions() != want {
        return Err(Error::shape(
            "frame size",
            format!("{}x{}", want.0, want.1),
            format!("{}x{}", frame.width(), frame.height()),
        ));
    }
    Ok(())
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Average-pools luminance onto a coarse grid, standardizes it and projects
/// it with a fixed pseudo-random matrix whose entries are hashes of their
/// indices.
#[derive(Debug, Clone)]
pub struct HashProjection {
    grid: TileGrid,
    pool_rows: usize,
    pool_cols: usize,
    dim: usize,
    projection: Vec<f32>,
}

impl HashProjection {
    pub const POOL_ROWS: usize = 20;
    pub const POOL_COLS: usize = 40;
    const SALT: u64 = 0x6d66_7472_7374_7562;

    pub fn new(grid: TileGrid, dim: usize) -> Self {
        let pool_rows = Self::POOL_ROWS.min(grid.frame_h);
        let pool_cols = Self::POOL_COLS.min(grid.frame_w);
        let inputs = pool_rows * pool_cols;
        let scale = (3.0 / inputs as f64).sqrt();
        let projection = (0..dim * inputs)
            .map(|i| {
                let h = splitmix64(Self::SALT ^ i as u64);
                let unit = (h >> 11) as f64 / (1u64 << 53) as f64;
                ((unit * 2.0 - 1.0) * scale) as f32
            })
            .collect();
        Self {
            grid,
            pool_rows,
            pool_cols,
            dim,
            projection,
        }
    }

    /// Pooled luminance in `[0, 1]`, row-major `pool_rows × pool_cols`.
    pub fn pool(&self, frame: &RgbImage) -> Vec<f32> {
        let (w, h) = (frame.width() as usize, frame.height() as usize);
        let mut sums = vec![0f64; self.pool_rows * self.pool_cols];
        let mut counts = vec![0u32; self.pool_rows * self.pool_cols];
        for (x, y, p) in frame.enumerate_pixels() {
            let r = y as usize * self.pool_rows / h;
            let c = x as usize * self.pool_cols / w;
            let luma = 0.299 * p.0[0] as f64 + 0.587 * p.0[1] as f64 + 0.114 * p.0[2] as f64;
            sums[r * self.pool_cols + c] += luma / 255.0;
            counts[r * self.pool_cols + c] += 1;
        }
        sums.iter()
            .zip(&counts)
            .map(|(s, &n)| (s / n.max(1) as f64) as f32)
            .collect()
    }
}

impl FrameExtractor for HashProjection {
    fn identity(&self) -> String {
        format!("hash-projection-v2:{}x{}:{}", self.pool_rows, self.pool_cols, self.dim)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn extract(&self, frame: &RgbImage) -> Result<Vec<f32>> {
        check_frame(frame, &self.grid)?;
        let mut pooled = self.pool(frame);
        let inputs = pooled.len();
        // standardize so descriptors have roughly unit scale whatever the exposure
        let mean = pooled.iter().sum::<f32>() / inputs as f32;
        let var = pooled.iter().map(|x| (x - mean) * (x - mean)).sum::<f32>() / inputs as f32;
        let inv = 1.0 / (var + 1e-6).sqrt();
        for x in pooled.iter_mut() {
            *x = (*x - mean) * inv;
        }
        Ok(self
            .projection
            .chunks_exact(inputs)
            .map(|row| row.iter().zip(&pooled).map(|(w, x)| w * x).sum())
            .collect())
    }
}

fn conv_bn(vb: &VarBuilder, c_in: usize, c_out: usize, kernel: usize, stride: usize, groups: usize) -> Result<(Conv2d, BatchNorm)> {
    let cfg = Conv2dConfig {
        padding: kernel / 2,
        stride,
        groups,
        ..Default::default()
    };
    let conv = candle_nn::conv2d_no_bias(c_in, c_out, kernel, cfg, vb.pp("0"))?;
    let bn = candle_nn::batch_norm(c_out, 1e-5, vb.pp("1"))?;
    Ok((conv, bn))
}

#[derive(Debug, Clone)]
struct ConvBnAct {
    conv: Conv2d,
    bn: BatchNorm,
    relu6: bool,
}

impl ConvBnAct {
    fn new(vb: VarBuilder, c_in: usize, c_out: usize, kernel: usize, stride: usize, groups: usize, relu6: bool) -> Result<Self> {
        let (conv, bn) = conv_bn(&vb, c_in, c_out, kernel, stride, groups)?;
        Ok(Self { conv, bn, relu6 })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.bn.forward_t(&self.conv.forward(x)?, false)?;
        Ok(if self.relu6 { y.clamp(0f32, 6f32)? } else { y })
    }
}

#[derive(Debug, Clone)]
struct InvertedResidual {
    expand: Option<ConvBnAct>,
    depthwise: ConvBnAct,
    project: Conv2d,
    project_bn: BatchNorm,
    residual: bool,
}

impl InvertedResidual {
    fn new(vb: VarBuilder, c_in: usize, c_out: usize, stride: usize, expand_ratio: usize) -> Result<Self> {
        let hidden = c_in * expand_ratio;
        let vb = vb.pp("conv");
        let (expand, offset) = if expand_ratio == 1 {
            (None, 0)
        } else {
            (Some(ConvBnAct::new(vb.pp("0"), c_in, hidden, 1, 1, 1, true)?), 1)
        };
        let depthwise = ConvBnAct::new(vb.pp(offset), hidden, hidden, 3, stride, hidden, true)?;
        let project = candle_nn::conv2d_no_bias(hidden, c_out, 1, Default::default(), vb.pp(offset + 1))?;
        let project_bn = candle_nn::batch_norm(c_out, 1e-5, vb.pp(offset + 2))?;
        Ok(Self {
            expand,
            depthwise,
            project,
            project_bn,
            residual: stride == 1 && c_in == c_out,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        if let Some(e) = &self.expand {
            h = e.forward(&h)?;
        }
        h = self.depthwise.forward(&h)?;
        h = self.project_bn.forward_t(&self.project.forward(&h)?, false)?;
        Ok(if self.residual { (h + x)? } else { h })
    }
}

/// MobileNet-V2 (width 1.0) with torchvision parameter names.
#[derive(Debug, Clone)]
pub struct MobileNetV2 {
    stem: ConvBnAct,
    blocks: Vec<InvertedResidual>,
    head: ConvBnAct,
    classifier: candle_nn::Linear,
    grid: TileGrid,
    identity: String,
    device: Device,
}

impl MobileNetV2 {
    // (expand ratio, channels, repeats, first stride)
    const SETTINGS: [(usize, usize, usize, usize); 7] = [
        (1, 16, 1, 1),
        (6, 24, 2, 2),
        (6, 32, 3, 2),
        (6, 64, 4, 2),
        (6, 96, 3, 1),
        (6, 160, 3, 2),
        (6, 320, 1, 1),
    ];

    pub fn new(vb: VarBuilder, grid: TileGrid, identity: String) -> Result<Self> {
        let features = vb.pp("features");
        let stem = ConvBnAct::new(features.pp(0), 3, 32, 3, 2, 1, true)?;
        let mut blocks = Vec::new();
        let mut c_in = 32;
        let mut idx = 1;
        for (t, c, n, s) in Self::SETTINGS {
            for i in 0..n {
                let stride = if i == 0 { s } else { 1 };
                blocks.push(InvertedResidual::new(features.pp(idx), c_in, c, stride, t)?);
                c_in = c;
                idx += 1;
            }
        }
        let head = ConvBnAct::new(features.pp(idx), c_in, 1280, 1, 1, 1, true)?;
        let classifier = candle_nn::linear(1280, 1000, vb.pp("classifier").pp(1))?;
        Ok(Self {
            stem,
            blocks,
            head,
            classifier,
            grid,
            identity,
            device: vb.device().clone(),
        })
    }

    /// Loads torchvision-layout weights from a safetensors file.
    pub fn from_safetensors(path: &Path, grid: TileGrid) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let digest = Sha256::digest(&bytes);
        let short: String = digest.iter().take(8).map(|b| format!("{b:02x}")).collect();
        let tensors: HashMap<String, Tensor> = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?
            .into_iter()
            .map(|(k, v)| Ok((k, v.to_dtype(DType::F32)?)))
            .collect::<Result<_>>()?;
        let vb = VarBuilder::from_tensors(tensors, DType::F32, &Device::Cpu);
        Self::new(vb, grid, format!("mobilenet_v2:{short}"))
    }

    /// `x`: `(B, 3, H, W)` normalized images → `(B, 1000)` logits.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = self.stem.forward(x)?;
        for block in &self.blocks {
            h = block.forward(&h)?;
        }
        h = self.head.forward(&h)?;
        let pooled = h.mean(3)?.mean(2)?;
        Ok(self.classifier.forward(&pooled)?)
    }

    pub fn preprocess(&self, frame: &RgbImage) -> Result<Tensor> {
        let (w, h) = (frame.width() as usize, frame.height() as usize);
        Ok(Tensor::from_vec(normalize_frame(frame), (1, 3, h, w), &self.device)?)
    }
}

impl FrameExtractor for MobileNetV2 {
    fn identity(&self) -> String {
        self.identity.clone()
    }

    fn dim(&self) -> usize {
        1000
    }

    fn extract(&self, frame: &RgbImage) -> Result<Vec<f32>> {
        check_frame(frame, &self.grid)?;
        let logits = self.forward(&self.preprocess(frame)?)?;
        Ok(logits.squeeze(0)?.to_vec1::<f32>()?)
    }
}

/// Descriptors for every `(video_id, t_sec)` referenced by a sample set.
#[derive(Debug, Clone, Default)]
pub struct DescriptorStore {
    identity: String,
    dim: usize,
    table: BTreeMap<(String, u32), Vec<f32>>,
}

impl DescriptorStore {
    pub fn compute(
        samples: &[&[TraceSample]],
        frames: &dyn FrameSource,
        extractor: &dyn FrameExtractor,
    ) -> Result<Self> {
        let keys: BTreeSet<(String, u32)> = samples
            .iter()
            .flat_map(|set| set.iter())
            .flat_map(|s| s.frame_secs.iter().map(move |&sec| (s.video_id.clone(), sec)))
            .collect();
        let mut table = BTreeMap::new();
        for (video, sec) in keys {
            let frame = frames.frame(&video, sec)?;
            table.insert((video, sec), extractor.extract(&frame)?);
        }
        Ok(Self {
            identity: extractor.identity(),
            dim: extractor.dim(),
            table,
        })
    }

    pub fn from_table(identity: String, dim: usize, table: BTreeMap<(String, u32), Vec<f32>>) -> Result<Self> {
        if let Some(bad) = table.values().find(|v| v.len() != dim) {
            return Err(Error::shape("descriptor", dim, bad.len()));
        }
        Ok(Self { identity, dim, table })
    }

    pub fn identity(&self) -> &str {
        &self.identity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    pub fn get(&self, video_id: &str, t_sec: u32) -> Result<&[f32]> {
        self.table
            .get(&(video_id.to_string(), t_sec))
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::Data(format!("no descriptor for frame {video_id}/{t_sec}")))
    }

    /// Saves the table as a safetensors file; keys and identity go in the
    /// metadata so a cache built with a different extractor is refused on load.
    pub fn save(&self, path: &Path) -> Result<()> {
        let keys: Vec<(String, u32)> = self.table.keys().cloned().collect();
        let flat: Vec<f32> = self.table.values().flatten().copied().collect();
        let tensor = Tensor::from_vec(flat, (keys.len(), self.dim), &Device::Cpu)?;
        let mut meta = HashMap::new();
        meta.insert("identity".to_string(), self.identity.clone());
        meta.insert("keys".to_string(), serde_json::to_string(&keys)?);
        let bytes = safetensors::serialize([("descriptors", &tensor)], Some(meta))
            .map_err(|e| Error::Data(e.to_string()))?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, expected_identity: &str) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (_, meta) = safetensors::SafeTensors::read_metadata(&bytes)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let meta = meta.metadata().clone().unwrap_or_default();
        let identity = meta.get("identity").cloned().unwrap_or_default();
        if identity != expected_identity {
            return Err(Error::Data(format!(
                "descriptor cache {} was built by `{identity}`, expected `{expected_identity}`",
                path.display()
            )));
        }
        let keys: Vec<(String, u32)> = serde_json::from_str(meta.get("keys").map(String::as_str).unwrap_or("[]"))?;
        let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
        let t = tensors
            .get("descriptors")
            .ok_or_else(|| Error::Data("descriptor cache has no `descriptors` tensor".into()))?;
        let rows = t.to_vec2::<f32>()?;
        if rows.len() != keys.len() {
            return Err(Error::shape("descriptor cache rows", keys.len(), rows.len()));
        }
        let dim = rows.first().map_or(0, |r| r.len());
        Self::from_table(identity, dim, keys.into_iter().zip(rows).collect())
    }
}
