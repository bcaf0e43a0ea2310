//! Command-line entry points.

use std::io::Write;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{ExtractorKind, RunConfigFile};
use crate::data::{
    build_windows, load_traces, split_dataset, synth_dataset, write_traces, DatasetSplit, FrameDir, FrameSource,
    Split, TraceSample,
};
use crate::error::{Error, Result};
use crate::geometry::ViewportAnchor;
use crate::metrics::{bench_delay, evaluate, predict_anchors, EvalReport};
use crate::model::checkpoint::load_checkpoint;
use crate::model::{threshold, Batch, CheckpointMeta, DescriptorStore, FrameExtractor, HashProjection, Mftr, MobileNetV2};
use crate::render::render_heatmap;
use crate::training::{run_ablation_suite, train, EpochRecord, TrainData, TrainOptions};

/// Environment variable selecting the compute device. Only `cpu` is built in.
pub const DEVICE_ENV: &str = "MFTR_DEVICE";

#[derive(Debug, Parser)]
#[command(name = "mftr", version, about = "Tile-classification viewport prediction for 360° video")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the run seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset: traces, frames and a manifest.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes a run directory under --out.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Output directory; defaults to the checkpoint's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump score maps, masks and anchors for one sample.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Sample position within the split.
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        out: PathBuf,
        /// Also render heatmap PNGs with viewport rectangles.
        #[arg(long)]
        heatmap: bool,
    },
    /// Median latency of one batched forward pass.
    BenchDelay {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
        #[arg(long, default_value_t = 3)]
        warmup: usize,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every ablation variant and write the comparison table.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Process exit code for an error: 2 configuration, 3 data, 4 divergence, 1 other.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config { .. } => 2,
        Error::OutOfRange { .. } | Error::Trace { .. } | Error::Data(_) | Error::Io { .. } | Error::Image(_) => 3,
        Error::Divergence { .. } => 4,
        _ => 1,
    }
}

pub fn check_device() -> Result<Device> {
    match std::env::var(DEVICE_ENV) {
        Err(_) => Ok(Device::Cpu),
        Ok(v) if v.eq_ignore_ascii_case("cpu") => Ok(Device::Cpu),
        Ok(v) => Err(Error::config(DEVICE_ENV, format!("unsupported device `{v}`; this build runs on `cpu`"))),
    }
}

fn load_config(common: &Common) -> Result<RunConfigFile> {
    let mut cfg = match &common.config {
        Some(path) => RunConfigFile::load(path)?,
        None => RunConfigFile::default(),
    };
    if let Some(seed) = common.seed {
        cfg.apply_seed(seed);
        cfg.validate()?;
    }
    Ok(cfg)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Windows, split and descriptors for a run configuration.
pub struct Prepared {
    pub frames: Box<dyn FrameSource>,
    pub samples: Vec<TraceSample>,
    pub skipped: usize,
    pub split: DatasetSplit,
    pub store: DescriptorStore,
}

pub fn make_extractor(cfg: &RunConfigFile) -> Result<Box<dyn FrameExtractor>> {
    Ok(match cfg.data.extractor {
        ExtractorKind::Hash => Box::new(HashProjection::new(cfg.grid, cfg.model.descriptor_dim)),
        ExtractorKind::MobilenetV2 => {
            if cfg.model.descriptor_dim != 1000 {
                return Err(Error::config("model.descriptor_dim", "mobilenet_v2 produces 1000 features"));
            }
            let path = cfg.data.weights.as_ref().ok_or_else(|| Error::config("data.weights", "missing"))?;
            Box::new(MobileNetV2::from_safetensors(path, cfg.grid)?)
        }
    })
}

pub fn prepare(cfg: &RunConfigFile) -> Result<Prepared> {
    let (records, frames): (_, Box<dyn FrameSource>) = match (&cfg.data.traces, &cfg.data.frames) {
        (Some(traces), Some(frames)) => {
            if !traces.exists() {
                return Err(Error::Data(format!(
                    "trace file {} not found; run `mftr synth --out <dir>` or point data.traces at a JSON-lines file",
                    traces.display()
                )));
            }
            (load_traces(traces)?, Box::new(FrameDir::new(frames.clone(), cfg.grid)))
        }
        _ => {
            let (records, frames) = synth_dataset(&cfg.synth, &cfg.grid)?;
            (records, Box::new(frames))
        }
    };
    let windows = build_windows(&records, frames.as_ref(), cfg.model.t, cfg.model.horizon, &cfg.grid)?;
    if windows.samples.is_empty() {
        return Err(Error::Data("no complete windows in the dataset".into()));
    }
    let split = split_dataset(&windows.samples, &cfg.split)?;
    let extractor = make_extractor(cfg)?;
    let store = match &cfg.data.descriptor_cache {
        Some(path) if path.exists() => DescriptorStore::load(path, &extractor.identity())?,
        cache => {
            let store = DescriptorStore::compute(&[&windows.samples], frames.as_ref(), extractor.as_ref())?;
            if let Some(path) = cache {
                store.save(path)?;
            }
            store
        }
    };
    Ok(Prepared { frames, samples: windows.samples, skipped: windows.skipped, split, store })
}

#[derive(Debug, Serialize)]
struct Manifest {
    n_streams: usize,
    seconds_per_stream: usize,
    seed: u64,
    n_records: usize,
    n_frames: usize,
    history: usize,
    horizon: usize,
    windows: usize,
    traces_sha256: String,
}

pub fn cmd_synth(cfg: &RunConfigFile, out: &Path) -> Result<PathBuf> {
    let (records, frames) = synth_dataset(&cfg.synth, &cfg.grid)?;
    let traces = out.join("traces.jsonl");
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_traces(&traces, &records)?;
    frames.write_to_dir(&out.join("frames"))?;
    let windows = build_windows(&records, &frames, cfg.model.t, cfg.model.horizon, &cfg.grid)?;
    let bytes = std::fs::read(&traces).map_err(|e| Error::io(&traces, e))?;
    let manifest = Manifest {
        n_streams: cfg.synth.n_streams,
        seconds_per_stream: cfg.synth.seconds_per_stream,
        seed: cfg.synth.seed,
        n_records: records.len(),
        n_frames: frames.len(),
        history: cfg.model.t,
        horizon: cfg.model.horizon,
        windows: windows.samples.len(),
        traces_sha256: Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect(),
    };
    let path = out.join("manifest.json");
    write_file(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(path)
}

pub fn cmd_train(cfg: &RunConfigFile, out: &Path, log: &mut dyn Write) -> Result<PathBuf> {
    let prepared = prepare(cfg)?;
    let train_cfg = cfg.train_config();
    let stamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs());
    let run_dir = out.join(format!("{}-{stamp}", train_cfg.hash()));
    write_file(&run_dir.join("config.toml"), cfg.to_toml()?)?;
    let _ = writeln!(
        log,
        "windows {} (skipped {}), train {} / val {} / test {}",
        prepared.samples.len(),
        prepared.skipped,
        prepared.split.train.len(),
        prepared.split.val.len(),
        prepared.split.test.len()
    );
    let mut observer = |r: &EpochRecord, _: &Mftr| {
        let _ = writeln!(
            log,
            "epoch {:>3}  loss {:.5}  l_pos {:.5}  l_cls {:.5}  val AP {:.4}  val AO {:.4}",
            r.epoch, r.train_loss, r.l_pos, r.l_cls, r.val_ap, r.val_ao
        );
        ControlFlow::Continue(())
    };
    let data = TrainData { split: &prepared.split, store: &prepared.store };
    let outcome = train(
        &train_cfg,
        &data,
        TrainOptions { out_dir: Some(&run_dir), observer: Some(&mut observer), ..Default::default() },
    )?;
    for split in [Split::Val, Split::Test] {
        let samples = prepared.split.get(split);
        if !samples.is_empty() {
            evaluate(&outcome.model, samples, &prepared.store)?.write(&run_dir, &format!("eval_{}", split_name(split)))?;
        }
    }
    Ok(run_dir)
}

fn split_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
    }
}

/// Loads a checkpoint together with a run configuration that agrees with it.
fn checkpoint_and_config(common: &Common, path: &Path) -> Result<(Mftr, CheckpointMeta, RunConfigFile)> {
    let mut cfg = load_config(common)?;
    let (model, meta) = if common.config.is_some() {
        load_checkpoint(path, Some(&cfg.model))?
    } else {
        let (model, meta) = load_checkpoint(path, None)?;
        cfg.grid = meta.config.grid;
        cfg.model = meta.config.clone();
        (model, meta)
    };
    Ok((model, meta, cfg))
}

fn check_extractor(meta: &CheckpointMeta, store: &DescriptorStore) -> Result<()> {
    if meta.extractor != store.identity() {
        return Err(Error::config(
            "data.extractor",
            format!("checkpoint was trained on `{}` descriptors, data uses `{}`", meta.extractor, store.identity()),
        ));
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct DumpedPrediction<'a> {
    video_id: &'a str,
    user_id: &'a str,
    start_sec: u32,
    pred: &'a [ViewportAnchor],
    gt: &'a [ViewportAnchor],
}

pub fn cmd_eval(common: &Common, checkpoint: &Path, split: Split, out: &Path) -> Result<EvalReport> {
    let (model, meta, cfg) = checkpoint_and_config(common, checkpoint)?;
    let prepared = prepare(&cfg)?;
    check_extractor(&meta, &prepared.store)?;
    let samples = prepared.split.get(split);
    if samples.is_empty() {
        return Err(Error::Data(format!("split `{}` is empty", split_name(split))));
    }
    let preds = predict_anchors(&model, samples, &prepared.store, 16)?;
    let gts: Vec<Vec<ViewportAnchor>> = samples.iter().map(|s| s.gt_anchors.clone()).collect();
    let report = EvalReport::from_predictions(&preds, &gts, &cfg.grid)?;
    let name = split_name(split);
    report.write(out, &format!("eval_{name}"))?;
    let mut lines = String::new();
    for ((s, p), g) in samples.iter().zip(&preds).zip(&gts) {
        let row = DumpedPrediction { video_id: &s.video_id, user_id: &s.user_id, start_sec: s.start_sec, pred: p, gt: g };
        lines.push_str(&serde_json::to_string(&row)?);
        lines.push('\n');
    }
    write_file(&out.join(format!("predictions_{name}.jsonl")), lines)?;
    Ok(report)
}

#[derive(Debug, Serialize)]
struct PredictDump<'a> {
    video_id: &'a str,
    user_id: &'a str,
    start_sec: u32,
    gamma: f64,
    pred_anchors: &'a [ViewportAnchor],
    gt_anchors: &'a [ViewportAnchor],
    pred_heads: &'a [[f64; 2]],
}

fn matrix_csv(values: &[f64], cols: usize) -> String {
    values
        .chunks(cols)
        .map(|row| row.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","))
        .collect::<Vec<_>>()
        .join("\n")
        + "\n"
}

pub fn cmd_predict(common: &Common, checkpoint: &Path, split: Split, index: usize, out: &Path, heatmap: bool) -> Result<()> {
    let (model, meta, cfg) = checkpoint_and_config(common, checkpoint)?;
    let prepared = prepare(&cfg)?;
    check_extractor(&meta, &prepared.store)?;
    let samples = prepared.split.get(split);
    let sample = samples.get(index).ok_or_else(|| {
        Error::Data(format!("split `{}` has {} samples, no index {index}", split_name(split), samples.len()))
    })?;
    let batch = Batch::new(&[sample], &prepared.store, model.config(), model.dtype(), model.device())?;
    let pred = model.predict(&batch)?;
    let grid = cfg.grid;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for (k, map) in pred.scores[0].iter().enumerate() {
        let step = k + 1;
        write_file(&out.join(format!("scores_step{step}.csv")), matrix_csv(map, grid.n_cols))?;
        let mask: Vec<f64> = threshold(map, &grid, cfg.model.gamma)?.values().iter().map(|&m| m as f64).collect();
        write_file(&out.join(format!("mask_step{step}.csv")), matrix_csv(&mask, grid.n_cols))?;
        if heatmap {
            let sec = sample.frame_secs[cfg.model.t + k];
            let frame = prepared.frames.frame(&sample.video_id, sec).ok();
            let img = render_heatmap(map, &grid, frame.as_ref(), pred.anchors[0][k], Some(sample.gt_anchors[k]));
            img.save(out.join(format!("heatmap_step{step}.png")))?;
        }
    }
    let dump = PredictDump {
        video_id: &sample.video_id,
        user_id: &sample.user_id,
        start_sec: sample.start_sec,
        gamma: cfg.model.gamma,
        pred_anchors: &pred.anchors[0],
        gt_anchors: &sample.gt_anchors,
        pred_heads: &pred.heads[0],
    };
    write_file(&out.join("prediction.json"), serde_json::to_string_pretty(&dump)?)
}

/// Random inputs shaped like a real batch; latency does not depend on values.
pub fn synthetic_batch(model: &Mftr, batch_size: usize, seed: u64) -> Result<Batch> {
    let cfg = model.config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dev = model.device();
    let mut rand_tensor = |shape: &[usize], lo: f64, hi: f64| -> Result<Tensor> {
        let n = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        Ok(Tensor::from_vec(v, shape, dev)?.to_dtype(model.dtype())?)
    };
    let visual = if model.has_backbone() {
        rand_tensor(&[batch_size, cfg.visual_len(), 3, cfg.grid.frame_h, cfg.grid.frame_w], -2.0, 2.0)?
    } else {
        rand_tensor(&[batch_size, cfg.visual_len(), cfg.descriptor_dim], -1.0, 1.0)?
    };
    Ok(Batch {
        head_hist: rand_tensor(&[batch_size, cfg.t, 2], -1.5, 1.5)?,
        eye_hist: rand_tensor(&[batch_size, cfg.t, 2], 0.0, 1.0)?,
        visual,
        gt_heads: rand_tensor(&[batch_size, cfg.horizon, 2], -1.5, 1.5)?,
        gt_masks: Tensor::zeros((batch_size, cfg.horizon, cfg.grid.n_rows, cfg.grid.n_cols), model.dtype(), dev)?,
        gt_anchors: vec![vec![cfg.grid.anchor(0, 0)?; cfg.horizon]; batch_size],
    })
}

pub fn cmd_bench_delay(checkpoint: &Path, batch_size: usize, warmup: usize, trials: usize) -> Result<crate::metrics::DelayReport> {
    if batch_size == 0 {
        return Err(Error::config("batch_size", "must be at least 1"));
    }
    let (model, _) = load_checkpoint(checkpoint, None)?;
    let batch = synthetic_batch(&model, batch_size, 0)?;
    bench_delay(&model, &batch, warmup, trials)
}

pub fn run(cli: Cli) -> Result<()> {
    check_device()?;
    let mut stderr = std::io::stderr();
    match cli.command {
        Command::Synth { common, out } => {
            let cfg = load_config(&common)?;
            let manifest = cmd_synth(&cfg, &out)?;
            println!("{}", manifest.display());
        }
        Command::Train { common, out } => {
            let cfg = load_config(&common)?;
            let dir = cmd_train(&cfg, &out, &mut stderr)?;
            println!("{}", dir.display());
        }
        Command::Eval { common, checkpoint, split, out } => {
            let out = out.unwrap_or_else(|| checkpoint.parent().unwrap_or(Path::new(".")).to_path_buf());
            let report = cmd_eval(&common, &checkpoint, split, &out)?;
            print!("{}", report.to_csv());
        }
        Command::Predict { common, checkpoint, split, index, out, heatmap } => {
            cmd_predict(&common, &checkpoint, split, index, &out, heatmap)?;
            println!("{}", out.display());
        }
        Command::BenchDelay { checkpoint, batch_size, warmup, trials, out } => {
            let report = cmd_bench_delay(&checkpoint, batch_size, warmup, trials)?;
            let json = serde_json::to_string_pretty(&report)?;
            if let Some(path) = out {
                write_file(&path, &json)?;
            }
            println!("{json}");
        }
        Command::Ablate { common, out } => {
            let cfg = load_config(&common)?;
            let prepared = prepare(&cfg)?;
            let data = TrainData { split: &prepared.split, store: &prepared.store };
            let table = run_ablation_suite(&cfg.train_config(), &data, Some(&out), |row| {
                let status = match (&row.record, &row.error) {
                    (Some(r), _) => format!("best val AP {:.4} at epoch {}", r.best_val_ap, r.best_epoch),
                    (_, Some(e)) => format!("failed: {e}"),
                    _ => String::new(),
                };
                let _ = writeln!(std::io::stderr(), "{:<32} {status}", row.name);
            })?;
            print!("{}", table.to_csv());
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_are_distinct() {
        let codes = [
            exit_code(&Error::config("x", "y")),
            exit_code(&Error::Data("d".into())),
            exit_code(&Error::Divergence { epoch: 1, batch: 0 }),
            exit_code(&Error::Checkpoint("c".into())),
        ];
        assert_eq!(codes, [2, 3, 4, 1]);
    }

    #[test]
    fn flags_parse() {
        let cli = Cli::try_parse_from(["mftr", "eval", "--checkpoint", "m.safetensors", "--split", "val", "--seed", "3"]).unwrap();
        match cli.command {
            Command::Eval { split, common, .. } => {
                assert_eq!(split, Split::Val);
                assert_eq!(common.seed, Some(3));
            }
            other => panic!("{other:?}"),
        }
        assert!(Cli::try_parse_from(["mftr", "eval", "--checkpoint", "m", "--split", "dev"]).is_err());
    }
}
