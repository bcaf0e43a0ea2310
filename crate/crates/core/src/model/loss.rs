//! Training objective: head-position regression, tile cross-entropy and their
//! weighted sum.

use candle_core::{Tensor, D};

use super::config::ModelConfig;
use crate::error::{Error, Result};

/// Scores are clamped to `[EPS, 1 - EPS]` before taking logarithms.
pub const SCORE_EPS: f64 = 1e-7;

/// Squared Euclidean error per step, averaged over steps (and the batch).
/// `hp`, `gt`: `(B, T, 2)` or `(T, 2)`.
pub fn loss_pos(hp: &Tensor, gt: &Tensor) -> Result<Tensor> {
    if hp.dims() != gt.dims() {
        return Err(Error::shape("position loss", format!("{:?}", gt.dims()), format!("{:?}", hp.dims())));
    }
    Ok((hp - gt)?.sqr()?.sum(D::Minus1)?.mean_all()?)
}

/// Binary cross-entropy averaged over every tile of every step.
pub fn loss_cls(scores: &Tensor, gt_masks: &Tensor) -> Result<Tensor> {
    if scores.dims() != gt_masks.dims() {
        return Err(Error::shape("tile loss", format!("{:?}", gt_masks.dims()), format!("{:?}", scores.dims())));
    }
    let s = scores.clamp(SCORE_EPS, 1.0 - SCORE_EPS)?;
    let y = gt_masks.to_dtype(s.dtype())?;
    let pos = (&y * s.log()?)?;
    let neg = ((1.0 - &y)? * (1.0 - &s)?.log()?)?;
    Ok((pos + neg)?.mean_all()?.neg()?)
}

/// Loss weights after ablations: removing the position head drops its term,
/// removing the tile head drops the classification term.
pub fn loss_weights(cfg: &ModelConfig) -> (f64, f64) {
    let alpha = if cfg.ablation.no_position_head { 0.0 } else { cfg.alpha };
    let beta = if cfg.ablation.no_tile_head { 0.0 } else { cfg.beta };
    (alpha, beta)
}

pub fn total_loss_value(l_pos: f64, l_cls: f64, cfg: &ModelConfig) -> f64 {
    let (alpha, beta) = loss_weights(cfg);
    alpha * l_pos + beta * l_cls
}

pub fn total_loss(l_pos: &Tensor, l_cls: &Tensor, cfg: &ModelConfig) -> Result<Tensor> {
    let (alpha, beta) = loss_weights(cfg);
    Ok(((l_pos * alpha)? + (l_cls * beta)?)?)
}
