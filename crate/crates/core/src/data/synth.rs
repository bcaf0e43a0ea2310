//! Synthetic head-tracking dataset in which the video content predicts
//! where the user looks next.
//!
//! Each stream is its own video watched by one user. Yaw follows an
//! integrated Ornstein–Uhlenbeck velocity (smooth drift that wraps around
//! the sphere), pitch follows an OU process around the equator. The frame
//! shown at second `s` contains a bright Gaussian blob centred on the head's
//! projected position at `s + 1`.

use std::f64::consts::PI;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::frames::MemoryFrames;
use super::trace::TraceRecord;
use crate::error::{Error, Result};
use crate::geometry::{head_to_frame, GazePosition, HeadPosition, TileGrid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_streams: usize,
    pub seconds_per_stream: usize,
    pub seed: u64,
    /// Mean reversion rate of the yaw velocity (1/s).
    pub yaw_vel_theta: f64,
    /// Stationary std-dev of the yaw velocity (rad/s).
    pub yaw_vel_sigma: f64,
    pub pitch_theta: f64,
    /// Stationary std-dev of pitch (rad).
    pub pitch_sigma: f64,
    /// Pitch is clamped to `±pitch_limit`.
    pub pitch_limit: f64,
    pub blob_sigma_px: f64,
    /// Std-dev of the gaze offset from the head point, frame-normalized.
    pub gaze_noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_streams: 2,
            seconds_per_stream: 60,
            seed: 0,
            yaw_vel_theta: 0.5,
            yaw_vel_sigma: 0.35,
            pitch_theta: 0.4,
            pitch_sigma: 0.3,
            pitch_limit: 1.2,
            blob_sigma_px: 24.0,
            gaze_noise: 0.01,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_streams == 0 {
            return Err(Error::config("synth.n_streams", "must be at least 1"));
        }
        if !(self.pitch_limit > 0.0 && self.pitch_limit <= PI / 2.0) {
            return Err(Error::config("synth.pitch_limit", "must be in (0, π/2]"));
        }
        if self.blob_sigma_px <= 0.0 {
            return Err(Error::config("synth.blob_sigma_px", "must be positive"));
        }
        for (name, v) in [
            ("synth.yaw_vel_theta", self.yaw_vel_theta),
            ("synth.pitch_theta", self.pitch_theta),
        ] {
            if v <= 0.0 {
                return Err(Error::config(name, "must be positive"));
            }
        }
        for (name, v) in [
            ("synth.yaw_vel_sigma", self.yaw_vel_sigma),
            ("synth.pitch_sigma", self.pitch_sigma),
            ("synth.gaze_noise", self.gaze_noise),
        ] {
            if v < 0.0 {
                return Err(Error::config(name, "must be non-negative"));
            }
        }
        Ok(())
    }
}

/// Exact one-second step of an OU process with stationary std-dev `sigma`.
fn ou_step(x: f64, mean: f64, theta: f64, sigma: f64, noise: f64) -> f64 {
    let decay = (-theta).exp();
    mean + (x - mean) * decay + sigma * (1.0 - decay * decay).sqrt() * noise
}

fn wrap_yaw(yaw: f64) -> f64 {
    (yaw + PI).rem_euclid(2.0 * PI) - PI
}

pub fn synth_dataset(cfg: &SynthConfig, grid: &TileGrid) -> Result<(Vec<TraceRecord>, MemoryFrames)> {
    cfg.validate()?;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut records = Vec::with_capacity(cfg.n_streams * cfg.seconds_per_stream);
    let mut frames = MemoryFrames::new();

    for stream in 0..cfg.n_streams {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(stream as u64);
        let video_id = format!("synth{stream:03}");
        let user_id = format!("user{stream:03}");

        // one extra step so the last frame can show the following second
        let mut heads = Vec::with_capacity(cfg.seconds_per_stream + 1);
        let mut yaw = rng.random_range(-PI..PI);
        let mut pitch = (cfg.pitch_sigma * normal.sample(&mut rng))
            .clamp(-cfg.pitch_limit, cfg.pitch_limit);
        let mut yaw_vel = cfg.yaw_vel_sigma * normal.sample(&mut rng);
        for _ in 0..=cfg.seconds_per_stream {
            heads.push(HeadPosition::new(yaw, pitch)?);
            yaw_vel = ou_step(yaw_vel, 0.0, cfg.yaw_vel_theta, cfg.yaw_vel_sigma, normal.sample(&mut rng));
            yaw = wrap_yaw(yaw + yaw_vel);
            pitch = ou_step(pitch, 0.0, cfg.pitch_theta, cfg.pitch_sigma, normal.sample(&mut rng))
                .clamp(-cfg.pitch_limit, cfg.pitch_limit);
        }

        for sec in 0..cfg.seconds_per_stream {
            let head = heads[sec];
            let (u, v) = head_to_frame(head, grid);
            let gx = (u / grid.frame_w as f64 + cfg.gaze_noise * normal.sample(&mut rng)).clamp(0.0, 1.0);
            let gy = (v / grid.frame_h as f64 + cfg.gaze_noise * normal.sample(&mut rng)).clamp(0.0, 1.0);
            records.push(TraceRecord {
                video_id: video_id.clone(),
                user_id: user_id.clone(),
                t_sec: sec as u32,
                head,
                gaze: GazePosition::new(gx, gy)?,
            });
            let (bu, bv) = head_to_frame(heads[sec + 1], grid);
            frames.insert(&video_id, sec as u32, render_blob(grid, bu, bv, cfg.blob_sigma_px));
        }
    }
    Ok((records, frames))
}

/// Dark frame with one bright Gaussian blob; horizontal distance wraps.
pub fn render_blob(grid: &TileGrid, cu: f64, cv: f64, sigma: f64) -> RgbImage {
    let (w, h) = (grid.frame_w, grid.frame_h);
    let inv = 1.0 / (2.0 * sigma * sigma);
    // separable Gaussian: precompute per-column and per-row factors
    let col_w: Vec<f64> = (0..w)
        .map(|x| {
            let d = (x as f64 + 0.5 - cu).rem_euclid(w as f64);
            let d = d.min(w as f64 - d);
            (-d * d * inv).exp()
        })
        .collect();
    let row_w: Vec<f64> = (0..h)
        .map(|y| {
            let d = y as f64 + 0.5 - cv;
            (-d * d * inv).exp()
        })
        .collect();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let g = col_w[x as usize] * row_w[y as usize];
        let base = 16.0 + 232.0 * g;
        Rgb([base as u8, (base * 0.95) as u8, (12.0 + 200.0 * g) as u8])
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::windows::build_windows;

    #[test]
    fn deterministic_for_seed() {
        let grid = TileGrid::default();
        let cfg = SynthConfig { n_streams: 2, seconds_per_stream: 12, seed: 9, ..Default::default() };
        let (r1, f1) = synth_dataset(&cfg, &grid).unwrap();
        let (r2, f2) = synth_dataset(&cfg, &grid).unwrap();
        assert_eq!(r1, r2);
        for ((k1, a), (k2, b)) in f1.iter().zip(f2.iter()) {
            assert_eq!(k1, k2);
            assert_eq!(a.as_raw(), b.as_raw());
        }
        let other = SynthConfig { seed: 10, ..cfg };
        let (r3, _) = synth_dataset(&other, &grid).unwrap();
        assert_ne!(r1, r3);
    }

    #[test]
    fn blob_tracks_next_second_head() {
        let grid = TileGrid::default();
        let cfg = SynthConfig { n_streams: 1, seconds_per_stream: 20, seed: 2, ..Default::default() };
        let (records, frames) = synth_dataset(&cfg, &grid).unwrap();
        use crate::data::frames::FrameSource;
        for sec in 0..19 {
            let img = frames.frame(&records[0].video_id, sec).unwrap();
            let peak = img.pixels().map(|p| p.0[0]).max().unwrap();
            let (u, v) = head_to_frame(records[sec as usize + 1].head, &grid);
            let x = (u.floor() as u32).min(719);
            let y = (v.floor() as u32).min(359);
            assert!(img.get_pixel(x, y).0[0] + 1 >= peak, "sec {sec}: blob is not at ({u}, {v})");
            // far side of the sphere stays dark
            let far = ((u + 360.0).rem_euclid(720.0)) as u32;
            assert!(img.get_pixel(far, y).0[0] < 20);
        }
    }

    #[test]
    fn gaze_stays_near_head() {
        let grid = TileGrid::default();
        let (records, _) = synth_dataset(&SynthConfig::default(), &grid).unwrap();
        for r in &records {
            let (u, v) = head_to_frame(r.head, &grid);
            assert!((r.gaze.y() - v / 360.0).abs() < 0.1);
            let dx = (r.gaze.x() - u / 720.0).abs();
            assert!(dx < 0.1 || dx > 0.9);
        }
    }

    #[test]
    fn window_count_for_two_thirty_second_streams() {
        let grid = TileGrid::default();
        let cfg = SynthConfig { n_streams: 2, seconds_per_stream: 30, ..Default::default() };
        let (records, frames) = synth_dataset(&cfg, &grid).unwrap();
        let w = build_windows(&records, &frames, 5, 5, &grid).unwrap();
        assert_eq!(w.samples.len(), 42);
    }
}
