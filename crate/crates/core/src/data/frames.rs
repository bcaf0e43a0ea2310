//! Frame access. On disk, frames live at `<root>/<video_id>/<t_sec>.png`,
//! one per second, at the grid's frame resolution. Dataset adapters for
//! recorded head-tracking corpora should extract frames into this layout.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::RgbImage;

use crate::error::{Error, Result};
use crate::geometry::TileGrid;

pub trait FrameSource {
    fn has_frame(&self, video_id: &str, t_sec: u32) -> bool;

    /// Returns the frame at the grid resolution.
    fn frame(&self, video_id: &str, t_sec: u32) -> Result<RgbImage>;
}

/// Frames stored as PNG files under a root directory.
#[derive(Debug, Clone)]
pub struct FrameDir {
    root: PathBuf,
    grid: TileGrid,
}

impl FrameDir {
    pub fn new(root: impl Into<PathBuf>, grid: TileGrid) -> Self {
        Self {
            root: root.into(),
            grid,
        }
    }

    pub fn path_of(root: &Path, video_id: &str, t_sec: u32) -> PathBuf {
        root.join(video_id).join(format!("{t_sec}.png"))
    }
}

impl FrameSource for FrameDir {
    fn has_frame(&self, video_id: &str, t_sec: u32) -> bool {
        Self::path_of(&self.root, video_id, t_sec).is_file()
    }

    fn frame(&self, video_id: &str, t_sec: u32) -> Result<RgbImage> {
        let path = Self::path_of(&self.root, video_id, t_sec);
        let img = image::open(&path)
            .map_err(|e| Error::Data(format!("cannot read frame {}: {e}", path.display())))?
            .to_rgb8();
        Ok(downscale(img, &self.grid))
    }
}

/// Resizes to the grid's frame resolution when needed.
pub fn downscale(img: RgbImage, grid: &TileGrid) -> RgbImage {
    let (w, h) = (grid.frame_w as u32, grid.frame_h as u32);
    if img.width() == w && img.height() == h {
        img
    } else {
        image::imageops::resize(&img, w, h, FilterType::Triangle)
    }
}

/// In-memory frames keyed by `(video_id, t_sec)`.
#[derive(Debug, Clone, Default)]
pub struct MemoryFrames {
    frames: BTreeMap<(String, u32), RgbImage>,
}

impl MemoryFrames {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, video_id: &str, t_sec: u32, frame: RgbImage) {
        self.frames.insert((video_id.to_string(), t_sec), frame);
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(String, u32), &RgbImage)> {
        self.frames.iter()
    }

    pub fn remove(&mut self, video_id: &str, t_sec: u32) -> Option<RgbImage> {
        self.frames.remove(&(video_id.to_string(), t_sec))
    }

    /// Writes every frame under `root` using the on-disk layout.
    pub fn write_to_dir(&self, root: &Path) -> Result<()> {
        for ((video, sec), img) in &self.frames {
            let path = FrameDir::path_of(root, video, *sec);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            img.save(&path)?;
        }
        Ok(())
    }
}

impl FrameSource for MemoryFrames {
    fn has_frame(&self, video_id: &str, t_sec: u32) -> bool {
        self.frames.contains_key(&(video_id.to_string(), t_sec))
    }

    fn frame(&self, video_id: &str, t_sec: u32) -> Result<RgbImage> {
        self.frames
            .get(&(video_id.to_string(), t_sec))
            .cloned()
            .ok_or_else(|| Error::Data(format!("missing frame {video_id}/{t_sec}")))
    }
}
