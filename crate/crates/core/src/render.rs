//! Score-map heatmaps with viewport rectangles.

use image::{Rgb, RgbImage};

use crate::geometry::{TileGrid, ViewportAnchor};

pub const PRED_COLOR: Rgb<u8> = Rgb([230, 30, 30]);
pub const GT_COLOR: Rgb<u8> = Rgb([250, 220, 20]);

/// Column runs `(first_col, width)` covered by a viewport; two runs when it
/// wraps past the right edge.
pub fn viewport_segments(anchor: ViewportAnchor, grid: &TileGrid) -> Vec<(usize, usize)> {
    let end = anchor.col + grid.vp_cols;
    if end <= grid.n_cols {
        vec![(anchor.col, grid.vp_cols)]
    } else {
        vec![(anchor.col, grid.n_cols - anchor.col), (0, end - grid.n_cols)]
    }
}

fn colormap(s: f64) -> [f64; 3] {
    let s = s.clamp(0.0, 1.0);
    let r = (1.5 - (4.0 * s - 3.0).abs()).clamp(0.0, 1.0);
    let g = (1.5 - (4.0 * s - 2.0).abs()).clamp(0.0, 1.0);
    let b = (1.5 - (4.0 * s - 1.0).abs()).clamp(0.0, 1.0);
    [r * 255.0, g * 255.0, b * 255.0]
}

fn draw_rect(img: &mut RgbImage, x0: u32, y0: u32, x1: u32, y1: u32, color: Rgb<u8>, thickness: u32) {
    for y in y0..y1 {
        for x in x0..x1 {
            let edge = x < x0 + thickness || x + thickness >= x1 || y < y0 + thickness || y + thickness >= y1;
            if edge {
                img.put_pixel(x, y, color);
            }
        }
    }
}

fn draw_viewport(img: &mut RgbImage, anchor: ViewportAnchor, grid: &TileGrid, color: Rgb<u8>) {
    let (tw, th) = (grid.tile_w() as u32, grid.tile_h() as u32);
    let y0 = anchor.row as u32 * th;
    let y1 = y0 + grid.vp_rows as u32 * th;
    for (c0, width) in viewport_segments(anchor, grid) {
        let x0 = c0 as u32 * tw;
        draw_rect(img, x0, y0, x0 + width as u32 * tw, y1, color, 2);
    }
}

/// Renders one score map at frame resolution, blended over `frame` when
/// given, with the predicted viewport in red and the ground truth in yellow.
pub fn render_heatmap(
    scores: &[f64],
    grid: &TileGrid,
    frame: Option<&RgbImage>,
    pred: ViewportAnchor,
    gt: Option<ViewportAnchor>,
) -> RgbImage {
    let (w, h) = (grid.frame_w as u32, grid.frame_h as u32);
    let mut img = RgbImage::from_fn(w, h, |x, y| {
        let row = ((y as f64 / grid.tile_h()) as usize).min(grid.n_rows - 1);
        let col = ((x as f64 / grid.tile_w()) as usize).min(grid.n_cols - 1);
        let heat = colormap(scores[row * grid.n_cols + col]);
        let px = match frame {
            Some(f) => {
                let base = f.get_pixel(x, y).0;
                [0, 1, 2].map(|c| 0.55 * heat[c] + 0.45 * base[c] as f64)
            }
            None => heat,
        };
        Rgb(px.map(|v| v.round() as u8))
    });
    if let Some(g) = gt {
        draw_viewport(&mut img, g, grid, GT_COLOR);
    }
    draw_viewport(&mut img, pred, grid, PRED_COLOR);
    img
}
