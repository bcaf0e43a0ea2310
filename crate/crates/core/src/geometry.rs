//! Equirectangular frame geometry: head/gaze coordinates, the tile grid,
//! viewport anchors and tile masks.
//!
//! Conventions: yaw `-π` maps to pixel column 0 and increases to the right;
//! pitch `+π/2` maps to pixel row 0 (top of the frame). Longitude wraps
//! modulo the frame width, latitude does not, so a viewport anchor's row is
//! bounded by `n_rows - vp_rows` while its column is free.

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Head orientation in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadPosition {
    yaw: f64,
    pitch: f64,
}

impl HeadPosition {
    pub fn new(yaw: f64, pitch: f64) -> Result<Self> {
        if !(-PI..=PI).contains(&yaw) {
            return Err(Error::OutOfRange {
                what: "yaw",
                value: yaw,
                range: "[-π, π]",
            });
        }
        if !(-FRAC_PI_2..=FRAC_PI_2).contains(&pitch) {
            return Err(Error::OutOfRange {
                what: "pitch",
                value: pitch,
                range: "[-π/2, π/2]",
            });
        }
        Ok(Self { yaw, pitch })
    }

    /// Builds a position from arbitrary reals by wrapping yaw onto `[-π, π)`
    /// and clamping pitch. Used for regressed predictions, which are not
    /// range-constrained.
    pub fn wrapped(yaw: f64, pitch: f64) -> Self {
        let yaw = if yaw.is_finite() {
            (yaw + PI).rem_euclid(2.0 * PI) - PI
        } else {
            0.0
        };
        let pitch = if pitch.is_finite() {
            pitch.clamp(-FRAC_PI_2, FRAC_PI_2)
        } else {
            0.0
        };
        Self { yaw, pitch }
    }

    pub fn yaw(&self) -> f64 {
        self.yaw
    }

    pub fn pitch(&self) -> f64 {
        self.pitch
    }
}

/// Gaze point in frame-normalized coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GazePosition {
    x: f64,
    y: f64,
}

impl GazePosition {
    pub fn new(x: f64, y: f64) -> Result<Self> {
        for (what, value) in [("gaze x", x), ("gaze y", y)] {
            if !(0.0..=1.0).contains(&value) {
                return Err(Error::OutOfRange {
                    what,
                    value,
                    range: "[0, 1]",
                });
            }
        }
        Ok(Self { x, y })
    }

    pub fn x(&self) -> f64 {
        self.x
    }

    pub fn y(&self) -> f64 {
        self.y
    }
}

/// Uniform tiling of an equirectangular frame plus the viewport size in tiles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TileGrid {
    pub n_rows: usize,
    pub n_cols: usize,
    pub vp_rows: usize,
    pub vp_cols: usize,
    pub frame_w: usize,
    pub frame_h: usize,
}

impl Default for TileGrid {
    fn default() -> Self {
        Self {
            n_rows: 10,
            n_cols: 20,
            vp_rows: 4,
            vp_cols: 9,
            frame_w: 720,
            frame_h: 360,
        }
    }
}

impl TileGrid {
    pub fn new(
        n_rows: usize,
        n_cols: usize,
        vp_rows: usize,
        vp_cols: usize,
        frame_w: usize,
        frame_h: usize,
    ) -> Result<Self> {
        let grid = Self {
            n_rows,
            n_cols,
            vp_rows,
            vp_cols,
            frame_w,
            frame_h,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_rows == 0 || self.n_cols == 0 {
            return Err(Error::config("grid.n_rows", "grid must have at least one tile"));
        }
        if self.vp_rows == 0 || self.vp_rows > self.n_rows {
            return Err(Error::config("grid.vp_rows", "must be in 1..=n_rows"));
        }
        if self.vp_cols == 0 || self.vp_cols > self.n_cols {
            return Err(Error::config("grid.vp_cols", "must be in 1..=n_cols"));
        }
        if self.frame_w == 0 || self.frame_w % self.n_cols != 0 {
            return Err(Error::config("grid.frame_w", "must be a positive multiple of n_cols"));
        }
        if self.frame_h == 0 || self.frame_h % self.n_rows != 0 {
            return Err(Error::config("grid.frame_h", "must be a positive multiple of n_rows"));
        }
        Ok(())
    }

    pub fn n_tiles(&self) -> usize {
        self.n_rows * self.n_cols
    }

    pub fn viewport_tiles(&self) -> usize {
        self.vp_rows * self.vp_cols
    }

    pub fn tile_w(&self) -> f64 {
        (self.frame_w / self.n_cols) as f64
    }

    pub fn tile_h(&self) -> f64 {
        (self.frame_h / self.n_rows) as f64
    }

    /// Number of legal anchor rows (latitude does not wrap).
    pub fn anchor_rows(&self) -> usize {
        self.n_rows - self.vp_rows + 1
    }

    /// Number of legal anchor columns. A viewport spanning the full width
    /// covers the same tiles from every column, so only column 0 is kept.
    pub fn anchor_cols(&self) -> usize {
        if self.vp_cols == self.n_cols {
            1
        } else {
            self.n_cols
        }
    }

    /// All legal anchors in lexicographic (row, col) order.
    pub fn anchors(&self) -> impl Iterator<Item = ViewportAnchor> + '_ {
        let cols = self.anchor_cols();
        (0..self.anchor_rows()).flat_map(move |row| (0..cols).map(move |col| ViewportAnchor { row, col }))
    }

    pub fn anchor(&self, row: usize, col: usize) -> Result<ViewportAnchor> {
        if row >= self.anchor_rows() {
            return Err(Error::OutOfRange {
                what: "anchor row",
                value: row as f64,
                range: "[0, n_rows - vp_rows]",
            });
        }
        if col >= self.anchor_cols() {
            return Err(Error::OutOfRange {
                what: "anchor col",
                value: col as f64,
                range: "[0, n_cols) (0 only for full-width viewports)",
            });
        }
        Ok(ViewportAnchor { row, col })
    }
}

/// Top-left tile of a viewport.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ViewportAnchor {
    pub row: usize,
    pub col: usize,
}

/// Binary `n_rows × n_cols` matrix, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TileMask {
    rows: usize,
    cols: usize,
    values: Vec<u8>,
}

impl TileMask {
    pub fn zeros(grid: &TileGrid) -> Self {
        Self {
            rows: grid.n_rows,
            cols: grid.n_cols,
            values: vec![0; grid.n_tiles()],
        }
    }

    pub fn from_values(grid: &TileGrid, values: Vec<u8>) -> Result<Self> {
        if values.len() != grid.n_tiles() {
            return Err(Error::shape("tile mask", grid.n_tiles(), values.len()));
        }
        if values.iter().any(|&v| v > 1) {
            return Err(Error::Data("tile mask entries must be 0 or 1".into()));
        }
        Ok(Self {
            rows: grid.n_rows,
            cols: grid.n_cols,
            values,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.values[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.values[row * self.cols + col] = value as u8;
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn count_ones(&self) -> usize {
        self.values.iter().map(|&v| v as usize).sum()
    }

    /// True when every set tile of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &TileMask) -> bool {
        self.values
            .iter()
            .zip(&other.values)
            .all(|(&a, &b)| a <= b)
    }

    /// Cyclic shift by `k` columns to the right.
    pub fn shift_cols(&self, k: usize) -> TileMask {
        let mut out = self.clone();
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.values[r * self.cols + (c + k) % self.cols] = self.get(r, c);
            }
        }
        out
    }
}

/// Maps a head orientation to equirectangular pixel coordinates.
/// `u == frame_w` wraps to 0, so the returned `u` is in `[0, frame_w)`.
pub fn head_to_frame(head: HeadPosition, grid: &TileGrid) -> (f64, f64) {
    let w = grid.frame_w as f64;
    let h = grid.frame_h as f64;
    let mut u = (head.yaw + PI) / (2.0 * PI) * w;
    if u >= w {
        u -= w;
    }
    let v = (FRAC_PI_2 - head.pitch) / PI * h;
    (u, v)
}

/// Inverse of [`head_to_frame`].
pub fn frame_to_head(u: f64, v: f64, grid: &TileGrid) -> HeadPosition {
    let yaw = u / grid.frame_w as f64 * 2.0 * PI - PI;
    let pitch = FRAC_PI_2 - v / grid.frame_h as f64 * PI;
    HeadPosition::wrapped(yaw, pitch)
}

pub fn tile_of(u: f64, v: f64, grid: &TileGrid) -> Result<(usize, usize)> {
    if !(0.0..grid.frame_w as f64).contains(&u) {
        return Err(Error::OutOfRange {
            what: "pixel u",
            value: u,
            range: "[0, frame_w)",
        });
    }
    if !(0.0..=grid.frame_h as f64).contains(&v) {
        return Err(Error::OutOfRange {
            what: "pixel v",
            value: v,
            range: "[0, frame_h]",
        });
    }
    let row = ((v / grid.tile_h()).floor() as usize).min(grid.n_rows - 1);
    let col = ((u / grid.tile_w()).floor() as usize).min(grid.n_cols - 1);
    Ok((row, col))
}

fn wrapped_distance(a: f64, b: f64, period: f64) -> f64 {
    let d = (a - b).rem_euclid(period);
    d.min(period - d)
}

/// Anchor whose viewport center is closest (tile space, wrapped longitude)
/// to the head's projected position. Ties go to the smallest row, then col.
pub fn nearest_viewport(head: HeadPosition, grid: &TileGrid) -> ViewportAnchor {
    let (u, v) = head_to_frame(head, grid);
    let target_row = v / grid.tile_h();
    let target_col = u / grid.tile_w();
    let half_r = grid.vp_rows as f64 / 2.0;
    let half_c = grid.vp_cols as f64 / 2.0;
    let period = grid.n_cols as f64;

    let mut best = ViewportAnchor { row: 0, col: 0 };
    let mut best_d2 = f64::INFINITY;
    for anchor in grid.anchors() {
        let dr = anchor.row as f64 + half_r - target_row;
        let dc = wrapped_distance(anchor.col as f64 + half_c, target_col, period);
        let d2 = dr * dr + dc * dc;
        if d2 < best_d2 - 1e-12 {
            best_d2 = d2;
            best = anchor;
        }
    }
    best
}

pub fn viewport_mask(anchor: ViewportAnchor, grid: &TileGrid) -> TileMask {
    let mut mask = TileMask::zeros(grid);
    for r in anchor.row..anchor.row + grid.vp_rows {
        for k in 0..grid.vp_cols {
            mask.set(r, (anchor.col + k) % grid.n_cols, true);
        }
    }
    mask
}

/// Anchor whose viewport covers the most interested tiles; ties go to the
/// smallest row, then col. Uses a 2-D prefix sum over the column-doubled
/// mask so each anchor is scored in O(1).
pub fn select_viewport(interest: &TileMask, grid: &TileGrid) -> ViewportAnchor {
    let rows = grid.n_rows;
    let cols = grid.n_cols;
    let wide = 2 * cols;
    // prefix[(r + 1) * (wide + 1) + (c + 1)] = sum over [0, r] x [0, c]
    let stride = wide + 1;
    let mut prefix = vec![0u32; (rows + 1) * stride];
    for r in 0..rows {
        let mut run = 0u32;
        for c in 0..wide {
            run += interest.get(r, c % cols) as u32;
            prefix[(r + 1) * stride + c + 1] = prefix[r * stride + c + 1] + run;
        }
    }
    let rect = |r0: usize, c0: usize| -> u32 {
        let r1 = r0 + grid.vp_rows;
        let c1 = c0 + grid.vp_cols;
        prefix[r1 * stride + c1] + prefix[r0 * stride + c0]
            - prefix[r0 * stride + c1]
            - prefix[r1 * stride + c0]
    };

    let mut best = ViewportAnchor { row: 0, col: 0 };
    let mut best_count = 0u32;
    let mut first = true;
    for anchor in grid.anchors() {
        let count = rect(anchor.row, anchor.col);
        if first || count > best_count {
            best = anchor;
            best_count = count;
            first = false;
        }
    }
    best
}

pub fn overlap_count(a: ViewportAnchor, b: ViewportAnchor, grid: &TileGrid) -> usize {
    let row_overlap = {
        let lo = a.row.max(b.row);
        let hi = (a.row + grid.vp_rows).min(b.row + grid.vp_rows);
        hi.saturating_sub(lo)
    };
    if row_overlap == 0 {
        return 0;
    }
    let col_overlap = (0..grid.vp_cols)
        .filter(|k| {
            let col = (a.col + k) % grid.n_cols;
            let offset = (col + grid.n_cols - b.col) % grid.n_cols;
            offset < grid.vp_cols
        })
        .count();
    row_overlap * col_overlap
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid() -> TileGrid {
        TileGrid::default()
    }

    /// Exhaustive reference: count every viewport tile of every anchor.
    fn select_exhaustive(interest: &TileMask, grid: &TileGrid) -> ViewportAnchor {
        let mut best = ViewportAnchor { row: 0, col: 0 };
        let mut best_count = None;
        for row in 0..=grid.n_rows - grid.vp_rows {
            let cols = if grid.vp_cols == grid.n_cols { 1 } else { grid.n_cols };
            for col in 0..cols {
                let mut count = 0;
                for dr in 0..grid.vp_rows {
                    for dc in 0..grid.vp_cols {
                        count += interest.get(row + dr, (col + dc) % grid.n_cols) as usize;
                    }
                }
                if best_count.map_or(true, |b| count > b) {
                    best_count = Some(count);
                    best = ViewportAnchor { row, col };
                }
            }
        }
        best
    }

    fn random_mask(rng: &mut ChaCha8Rng, grid: &TileGrid, p: f64) -> TileMask {
        let values = (0..grid.n_tiles()).map(|_| rng.random_bool(p) as u8).collect();
        TileMask::from_values(grid, values).unwrap()
    }

    #[test]
    fn head_to_frame_examples() {
        let g = grid();
        let (u, v) = head_to_frame(HeadPosition::new(0.0, 0.0).unwrap(), &g);
        assert_eq!((u, v), (360.0, 180.0));
        let (u, v) = head_to_frame(HeadPosition::new(-PI, FRAC_PI_2).unwrap(), &g);
        assert_eq!((u, v), (0.0, 0.0));
        let (u, v) = head_to_frame(HeadPosition::new(FRAC_PI_2, -PI / 4.0).unwrap(), &g);
        assert!((u - 540.0).abs() < 1e-9 && (v - 270.0).abs() < 1e-9);
        // yaw = π lands on the right edge and wraps
        let (u, _) = head_to_frame(HeadPosition::new(PI, 0.0).unwrap(), &g);
        assert_eq!(u, 0.0);
    }

    #[test]
    fn head_position_rejects_out_of_range() {
        assert!(HeadPosition::new(4.0, 0.0).is_err());
        assert!(HeadPosition::new(0.0, -1.6).is_err());
        assert!(GazePosition::new(1.01, 0.5).is_err());
        let wrapped = HeadPosition::wrapped(3.0 * PI / 2.0, 2.0);
        assert!((wrapped.yaw() + PI / 2.0).abs() < 1e-12);
        assert_eq!(wrapped.pitch(), FRAC_PI_2);
    }

    #[test]
    fn tile_of_examples() {
        let g = grid();
        assert_eq!(tile_of(360.0, 180.0, &g).unwrap(), (5, 10));
        assert_eq!(tile_of(0.0, 0.0, &g).unwrap(), (0, 0));
        assert_eq!(tile_of(719.9, 360.0, &g).unwrap(), (9, 19));
        assert!(tile_of(720.0, 0.0, &g).is_err());
        assert!(tile_of(0.0, -0.1, &g).is_err());
    }

    #[test]
    fn nearest_viewport_examples() {
        let g = grid();
        let a = nearest_viewport(HeadPosition::new(0.0, 0.0).unwrap(), &g);
        assert_eq!(a, ViewportAnchor { row: 3, col: 5 });

        // Brute force with explicit wrap on both sides of the seam.
        let a = nearest_viewport(HeadPosition::new(-PI, FRAC_PI_2).unwrap(), &g);
        assert_eq!(a, ViewportAnchor { row: 0, col: 15 });

        let full = TileGrid::new(10, 20, 10, 20, 720, 360).unwrap();
        for (yaw, pitch) in [(0.3, 0.2), (-2.0, -1.0), (PI, FRAC_PI_2)] {
            let a = nearest_viewport(HeadPosition::new(yaw, pitch).unwrap(), &full);
            assert_eq!(a, ViewportAnchor { row: 0, col: 0 });
        }
    }

    #[test]
    fn viewport_mask_examples() {
        let g = grid();
        let m = viewport_mask(ViewportAnchor { row: 3, col: 5 }, &g);
        assert_eq!(m.count_ones(), 36);
        for r in 0..10 {
            for c in 0..20 {
                let inside = (3..=6).contains(&r) && (5..=13).contains(&c);
                assert_eq!(m.get(r, c) == 1, inside, "tile ({r},{c})");
            }
        }

        let m = viewport_mask(ViewportAnchor { row: 0, col: 18 }, &g);
        let cols: Vec<usize> = (0..20).filter(|&c| m.get(0, c) == 1).collect();
        assert_eq!(cols, vec![0, 1, 2, 3, 4, 5, 6, 18, 19]);
        assert_eq!(m.count_ones(), 36);

        let full = TileGrid::new(10, 20, 10, 20, 720, 360).unwrap();
        let m = viewport_mask(ViewportAnchor { row: 0, col: 0 }, &full);
        assert_eq!(m.count_ones(), 200);
    }

    #[test]
    fn select_viewport_examples() {
        let g = grid();
        let target = ViewportAnchor { row: 3, col: 5 };
        let interest = viewport_mask(target, &g);
        assert_eq!(select_viewport(&interest, &g), target);
        assert_eq!(select_exhaustive(&interest, &g), target);

        let zeros = TileMask::zeros(&g);
        assert_eq!(select_viewport(&zeros, &g), ViewportAnchor { row: 0, col: 0 });
    }

    #[test]
    fn select_viewport_matches_exhaustive_scan() {
        let g = grid();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for i in 0..1000 {
            let p = [0.05, 0.2, 0.5, 0.8][i % 4];
            let mask = random_mask(&mut rng, &g, p);
            assert_eq!(select_viewport(&mask, &g), select_exhaustive(&mask, &g));
        }
    }

    #[test]
    fn overlap_examples() {
        let g = grid();
        let a = ViewportAnchor { row: 3, col: 5 };
        assert_eq!(overlap_count(a, a, &g), 36);
        assert_eq!(overlap_count(a, ViewportAnchor { row: 3, col: 7 }, &g), 28);
        assert_eq!(
            overlap_count(ViewportAnchor { row: 0, col: 0 }, ViewportAnchor { row: 6, col: 10 }, &g),
            0
        );
        // across the seam
        assert_eq!(
            overlap_count(ViewportAnchor { row: 0, col: 18 }, ViewportAnchor { row: 1, col: 0 }, &g),
            3 * 7
        );
    }

    #[test]
    fn nearest_viewport_covers_head_tile_on_degree_sweep() {
        let g = grid();
        for yaw_deg in -180..=180 {
            for pitch_deg in -90..=90 {
                let head =
                    HeadPosition::new((yaw_deg as f64).to_radians(), (pitch_deg as f64).to_radians())
                        .unwrap();
                let (u, v) = head_to_frame(head, &g);
                let (r, c) = tile_of(u, v, &g).unwrap();
                let mask = viewport_mask(nearest_viewport(head, &g), &g);
                assert_eq!(mask.get(r, c), 1, "yaw {yaw_deg} pitch {pitch_deg}");
            }
        }
    }

    #[test]
    fn column_shift_moves_unique_maximum() {
        let g = grid();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut checked = 0;
        while checked < 200 {
            let mask = random_mask(&mut rng, &g, 0.3);
            let counts: Vec<usize> = g
                .anchors()
                .map(|a| overlap_mask_count(&mask, a, &g))
                .collect();
            let max = *counts.iter().max().unwrap();
            if counts.iter().filter(|&&c| c == max).count() != 1 {
                continue;
            }
            let base = select_viewport(&mask, &g);
            let k = rng.random_range(0..g.n_cols);
            let shifted = select_viewport(&mask.shift_cols(k), &g);
            assert_eq!(shifted, ViewportAnchor { row: base.row, col: (base.col + k) % g.n_cols });
            checked += 1;
        }
    }

    fn overlap_mask_count(mask: &TileMask, a: ViewportAnchor, g: &TileGrid) -> usize {
        let vp = viewport_mask(a, g);
        mask.values().iter().zip(vp.values()).filter(|(&m, &v)| m == 1 && v == 1).count()
    }

    proptest! {
        #[test]
        fn overlap_is_symmetric_and_bounded(r1 in 0usize..7, c1 in 0usize..20, r2 in 0usize..7, c2 in 0usize..20) {
            let g = grid();
            let a = ViewportAnchor { row: r1, col: c1 };
            let b = ViewportAnchor { row: r2, col: c2 };
            let ab = overlap_count(a, b, &g);
            prop_assert_eq!(ab, overlap_count(b, a, &g));
            prop_assert_eq!(overlap_count(a, a, &g), 36);
            let direct = viewport_mask(a, &g)
                .values()
                .iter()
                .zip(viewport_mask(b, &g).values())
                .filter(|(&x, &y)| x == 1 && y == 1)
                .count();
            prop_assert_eq!(ab, direct);
        }

        #[test]
        fn head_to_frame_monotone(yaw1 in -PI..PI, yaw2 in -PI..PI, p1 in -FRAC_PI_2..FRAC_PI_2, p2 in -FRAC_PI_2..FRAC_PI_2) {
            let g = grid();
            let (ua, va) = head_to_frame(HeadPosition::new(yaw1, p1).unwrap(), &g);
            let (ub, vb) = head_to_frame(HeadPosition::new(yaw2, p2).unwrap(), &g);
            if yaw1 < yaw2 { prop_assert!(ua <= ub); }
            if p1 < p2 { prop_assert!(va >= vb); }
        }

        #[test]
        fn frame_round_trip(yaw in -PI..PI, pitch in -FRAC_PI_2..FRAC_PI_2) {
            let g = grid();
            let head = HeadPosition::new(yaw, pitch).unwrap();
            let (u, v) = head_to_frame(head, &g);
            let back = frame_to_head(u, v, &g);
            prop_assert!((back.yaw() - yaw).abs() < 1e-9);
            prop_assert!((back.pitch() - pitch).abs() < 1e-9);
        }
    }
}
