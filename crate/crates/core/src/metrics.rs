//! Viewport prediction metrics and the batch-latency benchmark.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::TraceSample;
use crate::error::{Error, Result};
use crate::geometry::{overlap_count, TileGrid, ViewportAnchor};
use crate::model::{Batch, DescriptorStore, Mftr};

/// Fraction of steps whose predicted anchor equals the ground truth.
pub fn ap(preds: &[ViewportAnchor], gts: &[ViewportAnchor]) -> Result<f64> {
    check_lengths(preds, gts)?;
    let hits = preds.iter().zip(gts).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Mean fraction of the predicted viewport covered by the ground truth.
pub fn ao(preds: &[ViewportAnchor], gts: &[ViewportAnchor], grid: &TileGrid) -> Result<f64> {
    check_lengths(preds, gts)?;
    let size = grid.viewport_tiles() as f64;
    let total: f64 = preds
        .iter()
        .zip(gts)
        .map(|(&p, &g)| overlap_count(g, p, grid) as f64 / size)
        .sum();
    Ok(total / preds.len() as f64)
}

fn check_lengths(preds: &[ViewportAnchor], gts: &[ViewportAnchor]) -> Result<()> {
    if preds.len() != gts.len() {
        return Err(Error::shape("prediction/ground-truth lengths", gts.len(), preds.len()));
    }
    if preds.is_empty() {
        return Err(Error::Data("no steps to score".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub ap: f64,
    pub ao: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Entry `k - 1` scores the first `k` predicted steps.
    pub per_horizon: Vec<Score>,
    /// Mean of the per-horizon scores.
    pub overall: Score,
    pub n_samples: usize,
    pub delay_ms: Option<f64>,
    /// `AP_1 - AP_T`, the absolute drop from the shortest to the longest horizon.
    pub ap_drop: f64,
    pub ao_drop: f64,
    /// `(AP_1 - AP_T) / AP_1`; `None` when `AP_1` is zero.
    pub ap_drop_relative: Option<f64>,
    pub ao_drop_relative: Option<f64>,
}

impl EvalReport {
    /// Aggregates per-sample anchor sequences.
    pub fn from_predictions(
        preds: &[Vec<ViewportAnchor>],
        gts: &[Vec<ViewportAnchor>],
        grid: &TileGrid,
    ) -> Result<Self> {
        if preds.is_empty() {
            return Err(Error::Data("cannot evaluate an empty dataset".into()));
        }
        if preds.len() != gts.len() {
            return Err(Error::shape("evaluated samples", gts.len(), preds.len()));
        }
        let horizon = gts[0].len();
        let mut sums = vec![(0.0, 0.0); horizon];
        for (p, g) in preds.iter().zip(gts) {
            if p.len() != horizon || g.len() != horizon {
                return Err(Error::shape("sample horizon", horizon, p.len().min(g.len())));
            }
            for (k, sum) in sums.iter_mut().enumerate() {
                sum.0 += ap(&p[..=k], &g[..=k])?;
                sum.1 += ao(&p[..=k], &g[..=k], grid)?;
            }
        }
        let n = preds.len() as f64;
        let per_horizon: Vec<Score> = sums.iter().map(|&(a, o)| Score { ap: a / n, ao: o / n }).collect();
        let overall = Score {
            ap: per_horizon.iter().map(|s| s.ap).sum::<f64>() / horizon as f64,
            ao: per_horizon.iter().map(|s| s.ao).sum::<f64>() / horizon as f64,
        };
        let (first, last) = (per_horizon[0], per_horizon[horizon - 1]);
        let relative = |a: f64, b: f64| (a > 0.0).then(|| (a - b) / a);
        Ok(Self {
            overall,
            n_samples: preds.len(),
            delay_ms: None,
            ap_drop: first.ap - last.ap,
            ao_drop: first.ao - last.ao,
            ap_drop_relative: relative(first.ap, last.ap),
            ao_drop_relative: relative(first.ao, last.ao),
            per_horizon,
        })
    }

    pub fn horizon(&self) -> usize {
        self.per_horizon.len()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per horizon followed by an `overall` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("horizon,ap,ao,n_samples\n");
        for (k, s) in self.per_horizon.iter().enumerate() {
            out.push_str(&format!("{},{},{},{}\n", k + 1, s.ap, s.ao, self.n_samples));
        }
        out.push_str(&format!("overall,{},{},{}\n", self.overall.ap, self.overall.ao, self.n_samples));
        out
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join(format!("{stem}.json"));
        std::fs::write(&json, self.to_json()?).map_err(|e| Error::io(&json, e))?;
        let csv = dir.join(format!("{stem}.csv"));
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))
    }
}

/// Predicted anchors for every sample, in input order.
pub fn predict_anchors(
    model: &Mftr,
    samples: &[TraceSample],
    store: &DescriptorStore,
    batch_size: usize,
) -> Result<Vec<Vec<ViewportAnchor>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&TraceSample> = chunk.iter().collect();
        let batch = Batch::new(&refs, store, model.config(), model.dtype(), model.device())?;
        out.extend(model.predict(&batch)?.anchors);
    }
    Ok(out)
}

pub fn evaluate(model: &Mftr, samples: &[TraceSample], store: &DescriptorStore) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Data("cannot evaluate an empty dataset".into()));
    }
    let preds = predict_anchors(model, samples, store, 16)?;
    let gts: Vec<Vec<ViewportAnchor>> = samples.iter().map(|s| s.gt_anchors.clone()).collect();
    EvalReport::from_predictions(&preds, &gts, &model.config().grid)
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelayReport {
    pub median_ms: f64,
    pub trials_ms: Vec<f64>,
    pub batch_size: usize,
    pub horizon: usize,
    pub history: usize,
    pub n_warmup: usize,
    pub hardware: Hardware,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hardware {
    pub os: String,
    pub arch: String,
    pub cpu: String,
    pub threads: usize,
    pub device: String,
}

impl Hardware {
    pub fn detect() -> Self {
        let cpu = std::fs::read_to_string("/proc/cpuinfo")
            .ok()
            .and_then(|s| {
                s.lines()
                    .find(|l| l.starts_with("model name"))
                    .and_then(|l| l.split(':').nth(1))
                    .map(|m| m.trim().to_string())
            })
            .unwrap_or_else(|| "unknown".into());
        Self {
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            cpu,
            threads: std::thread::available_parallelism().map_or(1, |n| n.get()),
            device: "cpu".into(),
        }
    }
}

/// Median wall-clock time of one forward pass over `batch`.
pub fn bench_delay(model: &Mftr, batch: &Batch, n_warmup: usize, n_trials: usize) -> Result<DelayReport> {
    if n_trials == 0 {
        return Err(Error::config("n_trials", "must be at least 1"));
    }
    for _ in 0..n_warmup {
        model.predict(batch)?;
    }
    let mut trials = Vec::with_capacity(n_trials);
    for _ in 0..n_trials {
        let start = Instant::now();
        model.predict(batch)?;
        trials.push(start.elapsed().as_secs_f64() * 1e3);
    }
    Ok(DelayReport {
        median_ms: median(&trials),
        trials_ms: trials,
        batch_size: batch.len(),
        horizon: model.config().horizon,
        history: model.config().t,
        n_warmup,
        hardware: Hardware::detect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn a(row: usize, col: usize) -> ViewportAnchor {
        TileGrid::default().anchor(row, col).unwrap()
    }

    #[test]
    fn ap_counts_exact_matches() {
        let gts = [a(0, 0), a(1, 1), a(2, 2), a(3, 3), a(4, 4)];
        assert_eq!(ap(&gts, &gts).unwrap(), 1.0);
        let preds = [a(0, 0), a(1, 1), a(2, 2), a(0, 9), a(5, 5)];
        assert_eq!(ap(&preds, &gts).unwrap(), 0.6);
        let off = [a(6, 0), a(6, 1), a(6, 2), a(6, 3), a(6, 4)];
        assert_eq!(ap(&off, &gts).unwrap(), 0.0);
        assert!(ap(&preds[..2], &gts).is_err());
    }

    #[test]
    fn ao_overlap_values() {
        let grid = TileGrid::default();
        assert_eq!(ao(&[a(3, 5)], &[a(3, 5)], &grid).unwrap(), 1.0);
        let shifted = ao(&[a(3, 7)], &[a(3, 5)], &grid).unwrap();
        assert!((shifted - 28.0 / 36.0).abs() < 1e-12);
        assert_eq!(ao(&[a(0, 0), a(6, 10)], &[a(6, 10), a(0, 0)], &grid).unwrap(), 0.0);
    }

    #[test]
    fn perfect_and_full_overlap_coincide() {
        let grid = TileGrid::default();
        let anchors: Vec<ViewportAnchor> = grid.anchors().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let pick = |rng: &mut ChaCha8Rng| anchors[rng.random_range(0..anchors.len())];
            let n = rng.random_range(1..6);
            let gts: Vec<_> = (0..n).map(|_| pick(&mut rng)).collect();
            let preds: Vec<_> = gts.iter().map(|&g| if rng.random_bool(0.7) { g } else { pick(&mut rng) }).collect();
            let (p, o) = (ap(&preds, &gts).unwrap(), ao(&preds, &gts, &grid).unwrap());
            assert_eq!(p == 1.0, o == 1.0);
        }
    }

    proptest! {
        #[test]
        fn ao_symmetric_and_shift_invariant(r1 in 0usize..7, c1 in 0usize..20, r2 in 0usize..7, c2 in 0usize..20, k in 0usize..20) {
            let grid = TileGrid::default();
            let (p, g) = (a(r1, c1), a(r2, c2));
            prop_assert_eq!(ao(&[p], &[g], &grid).unwrap(), ao(&[g], &[p], &grid).unwrap());
            let (ps, gs) = (a(r1, (c1 + k) % 20), a(r2, (c2 + k) % 20));
            prop_assert_eq!(ao(&[p], &[g], &grid).unwrap(), ao(&[ps], &[gs], &grid).unwrap());
            prop_assert_eq!(ap(&[p], &[g]).unwrap(), ap(&[ps], &[gs]).unwrap());
        }
    }

    #[test]
    fn report_is_mean_of_per_sample_prefix_scores() {
        let grid = TileGrid::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let anchors: Vec<ViewportAnchor> = grid.anchors().collect();
        let gen = |rng: &mut ChaCha8Rng| (0..5).map(|_| anchors[rng.random_range(0..anchors.len())]).collect::<Vec<_>>();
        let gts: Vec<_> = (0..7).map(|_| gen(&mut rng)).collect();
        let preds: Vec<_> = gts
            .iter()
            .map(|g| g.iter().map(|&x| if rng.random_bool(0.5) { x } else { anchors[rng.random_range(0..140)] }).collect())
            .collect();
        let report = EvalReport::from_predictions(&preds, &gts, &grid).unwrap();
        for k in 1..=5 {
            let mean_ap: f64 = preds.iter().zip(&gts).map(|(p, g)| ap(&p[..k], &g[..k]).unwrap()).sum::<f64>() / 7.0;
            let mean_ao: f64 = preds.iter().zip(&gts).map(|(p, g)| ao(&p[..k], &g[..k], &grid).unwrap()).sum::<f64>() / 7.0;
            assert!((report.per_horizon[k - 1].ap - mean_ap).abs() < 1e-12);
            assert!((report.per_horizon[k - 1].ao - mean_ao).abs() < 1e-12);
        }

        let doubled_p: Vec<_> = preds.iter().chain(&preds).cloned().collect();
        let doubled_g: Vec<_> = gts.iter().chain(&gts).cloned().collect();
        let again = EvalReport::from_predictions(&doubled_p, &doubled_g, &grid).unwrap();
        for (x, y) in report.per_horizon.iter().zip(&again.per_horizon) {
            assert!((x.ap - y.ap).abs() < 1e-12 && (x.ao - y.ao).abs() < 1e-12);
        }

        let csv = report.to_csv();
        assert_eq!(csv.lines().count(), 1 + 5 + 1);
        assert!(csv.lines().last().unwrap().starts_with("overall,"));
    }

    #[test]
    fn perfect_single_sample() {
        let grid = TileGrid::default();
        let g = vec![vec![a(1, 2), a(3, 4)]];
        let r = EvalReport::from_predictions(&g, &g, &grid).unwrap();
        assert!(r.per_horizon.iter().all(|s| s.ap == 1.0 && s.ao == 1.0));
        assert_eq!(r.overall, Score { ap: 1.0, ao: 1.0 });
        assert_eq!(r.ap_drop, 0.0);
        assert!(EvalReport::from_predictions(&[], &[], &grid).is_err());
    }

    #[test]
    fn median_rule() {
        assert_eq!(median(&[10.0, 12.0, 11.0]), 11.0);
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), 2.5);
    }
}
