use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::frames::FrameSource;
use super::trace::TraceRecord;
use crate::error::{Error, Result};
use crate::geometry::{head_to_frame, nearest_viewport, HeadPosition, TileGrid, ViewportAnchor};

/// One training example cut from a `(video, user)` stream.
///
/// `frame_secs` lists the `t + T` seconds whose frames feed the visual
/// branch; frames (or their descriptors) are looked up by `(video_id, sec)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSample {
    pub video_id: String,
    pub user_id: String,
    pub start_sec: u32,
    /// `t × [yaw, pitch]` in radians.
    pub head_hist: Vec<[f64; 2]>,
    /// `t × [x, y]`, frame-normalized.
    pub eye_hist: Vec<[f64; 2]>,
    pub frame_secs: Vec<u32>,
    /// `T × [yaw, pitch]` for the prediction window.
    pub gt_heads: Vec<[f64; 2]>,
    pub gt_anchors: Vec<ViewportAnchor>,
}

impl TraceSample {
    pub fn history_len(&self) -> usize {
        self.head_hist.len()
    }

    pub fn horizon(&self) -> usize {
        self.gt_anchors.len()
    }

    pub fn key(&self) -> (&str, &str, u32) {
        (&self.video_id, &self.user_id, self.start_sec)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Windows {
    pub samples: Vec<TraceSample>,
    /// Windows dropped because a required frame was missing.
    pub skipped: usize,
}

/// Groups records by `(video_id, user_id)`, sorted by time.
pub fn group_streams(records: &[TraceRecord]) -> BTreeMap<(String, String), Vec<&TraceRecord>> {
    let mut streams: BTreeMap<(String, String), Vec<&TraceRecord>> = BTreeMap::new();
    for r in records {
        streams
            .entry((r.video_id.clone(), r.user_id.clone()))
            .or_default()
            .push(r);
    }
    for stream in streams.values_mut() {
        stream.sort_by_key(|r| r.t_sec);
    }
    streams
}

/// Number of windows a stream of `len` contiguous seconds yields.
pub fn window_count(len: usize, history: usize, horizon: usize) -> usize {
    (len + 1).saturating_sub(history + horizon)
}

/// Slides a `history + horizon` second window with a 1 s stride over every
/// contiguous run of each stream.
pub fn build_windows(
    records: &[TraceRecord],
    frames: &dyn FrameSource,
    history: usize,
    horizon: usize,
    grid: &TileGrid,
) -> Result<Windows> {
    if history == 0 || horizon == 0 {
        return Err(Error::config("model.t", "history and horizon must be positive"));
    }
    if horizon > history {
        return Err(Error::config("model.horizon", "horizon T must not exceed history t"));
    }
    let span = history + horizon;
    let mut out = Windows::default();

    for stream in group_streams(records).into_values() {
        for run in contiguous_runs(&stream) {
            for offset in 0..window_count(run.len(), history, horizon) {
                let window = &run[offset..offset + span];
                let first = window[0];
                let frame_secs: Vec<u32> = window.iter().map(|r| r.t_sec).collect();
                if !frame_secs
                    .iter()
                    .all(|&s| frames.has_frame(&first.video_id, s))
                {
                    out.skipped += 1;
                    continue;
                }
                let (past, future) = window.split_at(history);
                out.samples.push(TraceSample {
                    video_id: first.video_id.clone(),
                    user_id: first.user_id.clone(),
                    start_sec: first.t_sec,
                    head_hist: past.iter().map(|r| [r.head.yaw(), r.head.pitch()]).collect(),
                    eye_hist: past.iter().map(|r| [r.gaze.x(), r.gaze.y()]).collect(),
                    frame_secs,
                    gt_heads: future.iter().map(|r| [r.head.yaw(), r.head.pitch()]).collect(),
                    gt_anchors: future
                        .iter()
                        .map(|r| nearest_viewport(r.head, grid))
                        .collect(),
                });
            }
        }
    }
    Ok(out)
}

fn contiguous_runs<'a>(stream: &[&'a TraceRecord]) -> Vec<Vec<&'a TraceRecord>> {
    let mut runs: Vec<Vec<&TraceRecord>> = Vec::new();
    for &r in stream {
        match runs.last_mut() {
            Some(run) if run.last().map(|p| p.t_sec + 1) == Some(r.t_sec) => run.push(r),
            _ => runs.push(vec![r]),
        }
    }
    runs
}

/// Head position in tile-space, handy for debugging and plots.
pub fn head_tile_position(head: HeadPosition, grid: &TileGrid) -> (f64, f64) {
    let (u, v) = head_to_frame(head, grid);
    (v / grid.tile_h(), u / grid.tile_w())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::frames::MemoryFrames;
    use crate::geometry::GazePosition;
    use image::RgbImage;

    fn stream(video: &str, user: &str, secs: impl Iterator<Item = u32>) -> Vec<TraceRecord> {
        secs.map(|s| TraceRecord {
            video_id: video.into(),
            user_id: user.into(),
            t_sec: s,
            head: HeadPosition::new(-3.0 + 0.2 * s as f64, 0.1).unwrap(),
            gaze: GazePosition::new(0.5, 0.4).unwrap(),
        })
        .collect()
    }

    fn frames_for(records: &[TraceRecord]) -> MemoryFrames {
        let mut frames = MemoryFrames::new();
        for r in records {
            frames.insert(&r.video_id, r.t_sec, RgbImage::new(1, 1));
        }
        frames
    }

    #[test]
    fn window_counts() {
        let grid = TileGrid::default();
        for (len, expected) in [(12, 3), (10, 1), (9, 0)] {
            let recs = stream("v", "u", 0..len);
            let w = build_windows(&recs, &frames_for(&recs), 5, 5, &grid).unwrap();
            assert_eq!(w.samples.len(), expected, "len {len}");
        }
        let recs = stream("v", "u", 0..12);
        let w = build_windows(&recs, &frames_for(&recs), 5, 5, &grid).unwrap();
        let starts: Vec<u32> = w.samples.iter().map(|s| s.start_sec).collect();
        assert_eq!(starts, vec![0, 1, 2]);
    }

    #[test]
    fn gaps_split_streams_and_missing_frames_are_counted() {
        let grid = TileGrid::default();
        let mut recs = stream("v", "u", 0..11);
        recs.extend(stream("v", "u", 20..31));
        let mut frames = frames_for(&recs);
        let w = build_windows(&recs, &frames, 5, 5, &grid).unwrap();
        assert_eq!(w.samples.len(), 4);
        assert_eq!(w.skipped, 0);

        frames.remove("v", 25);
        let w = build_windows(&recs, &frames, 5, 5, &grid).unwrap();
        assert_eq!(w.samples.len(), 2);
        assert_eq!(w.skipped, 2);
    }

    #[test]
    fn sample_contents_and_ground_truth() {
        let grid = TileGrid::default();
        let recs = stream("v", "u", 0..12);
        let w = build_windows(&recs, &frames_for(&recs), 5, 3, &grid).unwrap();
        let s = &w.samples[1];
        assert_eq!(s.head_hist.len(), 5);
        assert_eq!(s.eye_hist.len(), 5);
        assert_eq!(s.frame_secs, (1..9).collect::<Vec<_>>());
        assert_eq!(s.gt_heads.len(), 3);
        assert_eq!(s.head_hist[0][0], recs[1].head.yaw());
        assert_eq!(s.gt_heads[0][0], recs[6].head.yaw());
        for (head, anchor) in s.gt_heads.iter().zip(&s.gt_anchors) {
            let h = HeadPosition::new(head[0], head[1]).unwrap();
            assert_eq!(nearest_viewport(h, &grid), *anchor);
        }
    }

    #[test]
    fn horizon_longer_than_history_is_rejected() {
        let grid = TileGrid::default();
        let recs = stream("v", "u", 0..20);
        assert!(build_windows(&recs, &frames_for(&recs), 3, 4, &grid).is_err());
    }
}
