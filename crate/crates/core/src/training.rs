//! Mini-batch training with AdamW, validation-AP early stopping and the
//! ablation sweep.

use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var};
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{DatasetSplit, SplitSpec, TraceSample};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalReport};
use crate::model::params::{restore, snapshot};
use crate::model::{save_checkpoint, Batch, DescriptorStore, Mftr, ModelConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a validation-AP improvement before stopping.
    pub early_stop_patience: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; off when `None`.
    pub grad_clip: Option<f64>,
    #[serde(skip)]
    pub model: ModelConfig,
    #[serde(skip)]
    pub split: SplitSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 16,
            max_epochs: 200,
            early_stop_patience: 10,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            grad_clip: None,
            model: ModelConfig::default(),
            split: SplitSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("train.lr", "must be a non-negative number"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if self.early_stop_patience == 0 {
            return Err(Error::config("train.early_stop_patience", "must be at least 1"));
        }
        if self.max_epochs == 0 {
            return Err(Error::config("train.max_epochs", "must be at least 1"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::config("train.grad_clip", "must be positive"));
            }
        }
        self.model.validate()?;
        self.split.validate()
    }

    /// Short stable digest of the full configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(&(self, &self.model, &self.split)).expect("config serializes");
        Sha256::digest(json.as_bytes())
            .iter()
            .take(8)
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub l_pos: f64,
    pub l_cls: f64,
    /// Validation scores at the full horizon.
    pub val_ap: f64,
    pub val_ao: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_ap: f64,
    pub best_checkpoint: Option<PathBuf>,
    pub wall_time_s: f64,
    pub stopped_early: bool,
}

impl RunRecord {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,l_pos,l_cls,val_ap,val_ao\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                e.epoch, e.train_loss, e.l_pos, e.l_cls, e.val_ap, e.val_ao
            ));
        }
        out
    }
}

/// Everything training needs besides the configuration.
pub struct TrainData<'a> {
    pub split: &'a DatasetSplit,
    pub store: &'a DescriptorStore,
}

pub struct TrainOutcome {
    /// Model restored to the best validation epoch.
    pub model: Mftr,
    pub record: RunRecord,
}

pub struct TrainOptions<'a> {
    pub dtype: DType,
    /// Directory for the best checkpoint and run record.
    pub out_dir: Option<&'a Path>,
    /// Called after every epoch; `Break` ends training.
    pub observer: Option<&'a mut dyn FnMut(&EpochRecord, &Mftr) -> ControlFlow<()>>,
}

impl Default for TrainOptions<'_> {
    fn default() -> Self {
        Self { dtype: DType::F32, out_dir: None, observer: None }
    }
}

fn clip_gradients(grads: &mut GradStore, vars: &[Var], max_norm: f64) -> Result<()> {
    let mut sq = 0.0;
    for v in vars {
        if let Some(g) = grads.get(v) {
            sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for v in vars {
            if let Some(g) = grads.remove(v) {
                grads.insert(v, (g * scale)?);
            }
        }
    }
    Ok(())
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

pub fn optimizer(model: &Mftr, cfg: &TrainConfig) -> Result<AdamW> {
    let params = ParamsAdamW {
        lr: cfg.lr,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: cfg.eps,
        weight_decay: cfg.weight_decay,
    };
    Ok(AdamW::new(model.trainable_vars(), params)?)
}

/// One optimization step; returns `(total, l_pos, l_cls)` before the update.
pub fn train_step(
    model: &Mftr,
    opt: &mut AdamW,
    batch: &Batch,
    grad_clip: Option<f64>,
) -> Result<(f64, f64, f64)> {
    let out = model.forward(batch)?;
    let losses = model.losses(&out, batch)?;
    let total = scalar(&losses.total)?;
    if !total.is_finite() {
        return Err(Error::Data("non-finite loss".into()));
    }
    let mut grads = losses.total.backward()?;
    if let Some(c) = grad_clip {
        clip_gradients(&mut grads, &model.trainable_vars(), c)?;
    }
    opt.step(&grads)?;
    Ok((total, scalar(&losses.pos)?, scalar(&losses.cls)?))
}

pub fn train(cfg: &TrainConfig, data: &TrainData, mut opts: TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.split.train.is_empty() || data.split.val.is_empty() {
        return Err(Error::Data("training needs non-empty train and val splits".into()));
    }
    let start = Instant::now();
    let model = Mftr::new(cfg.model.clone(), cfg.seed, opts.dtype, Device::Cpu)?;
    let mut opt = optimizer(&model, cfg)?;
    // separate stream for batch order so init and shuffling stay independent
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);

    let train: &[TraceSample] = &data.split.train;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = Vec::new();
    let mut best: Option<(usize, f64, Vec<(String, Tensor)>)> = None;
    let mut since_best = 0;
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut sum_pos, mut sum_cls) = (0.0, 0.0, 0.0);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let samples: Vec<&TraceSample> = chunk.iter().map(|&i| &train[i]).collect();
            let batch = Batch::new(&samples, data.store, model.config(), model.dtype(), model.device())?;
            let (total, pos, cls) = match train_step(&model, &mut opt, &batch, cfg.grad_clip) {
                Ok(v) => v,
                Err(Error::Data(msg)) if msg == "non-finite loss" => {
                    return Err(Error::Divergence { epoch, batch: b });
                }
                Err(e) => return Err(e),
            };
            let n = samples.len() as f64;
            sum += total * n;
            sum_pos += pos * n;
            sum_cls += cls * n;
        }
        let n = train.len() as f64;
        let val = evaluate(&model, &data.split.val, data.store)?;
        let last = val.per_horizon[val.horizon() - 1];
        let record = EpochRecord {
            epoch,
            train_loss: sum / n,
            l_pos: sum_pos / n,
            l_cls: sum_cls / n,
            val_ap: last.ap,
            val_ao: last.ao,
        };
        let improved = best.as_ref().is_none_or(|(_, ap, _)| record.val_ap > *ap);
        if improved {
            best = Some((epoch, record.val_ap, snapshot(model.var_map())?));
            since_best = 0;
        } else {
            since_best += 1;
        }
        epochs.push(record.clone());
        if let Some(obs) = opts.observer.as_mut() {
            if obs(&record, &model).is_break() {
                break;
            }
        }
        if since_best >= cfg.early_stop_patience {
            stopped_early = true;
            break;
        }
    }

    let (best_epoch, best_val_ap, params) = best.expect("at least one epoch ran");
    restore(model.var_map(), &params)?;
    let mut record = RunRecord {
        config_hash: cfg.hash(),
        epochs,
        best_epoch,
        best_val_ap,
        best_checkpoint: None,
        wall_time_s: start.elapsed().as_secs_f64(),
        stopped_early,
    };
    if let Some(dir) = opts.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("best.safetensors");
        save_checkpoint(&model, data.store.identity(), &path)?;
        record.best_checkpoint = Some(path);
        let json = dir.join("run_record.json");
        std::fs::write(&json, serde_json::to_string_pretty(&record)?).map_err(|e| Error::io(&json, e))?;
        let csv = dir.join("run_record.csv");
        std::fs::write(&csv, record.to_csv()).map_err(|e| Error::io(&csv, e))?;
    }
    Ok(TrainOutcome { model, record })
}

/// Which published table a sweep variant belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepTable {
    Components,
    EncoderLayers,
    LossWeights,
}

#[derive(Debug, Clone)]
pub struct Variant {
    pub table: SweepTable,
    pub name: String,
    pub config: TrainConfig,
}

/// The 14 sweep variants: five component removals, encoder depths 2/4/6/8
/// and five `(α, β)` pairs.
pub fn ablation_variants(base: &TrainConfig) -> Vec<Variant> {
    let mut out = Vec::new();
    let removals: [(&str, fn(&mut ModelConfig)); 5] = [
        ("w/o Temporal Transformer", |m| m.ablation.no_temporal_transformer = true),
        ("w/o Position Prediction Head", |m| m.ablation.no_position_head = true),
        ("w/o Visual Transformer", |m| m.ablation.no_visual_transformer = true),
        ("w/o Temporal-Visual Fusion", |m| m.ablation.no_fusion = true),
        ("w/o Tile Classification Head", |m| m.ablation.no_tile_head = true),
    ];
    for (name, apply) in removals {
        let mut config = base.clone();
        apply(&mut config.model);
        out.push(Variant { table: SweepTable::Components, name: name.into(), config });
    }
    for layers in [2, 4, 6, 8] {
        let mut config = base.clone();
        config.model.n_encoder_layers = layers;
        out.push(Variant { table: SweepTable::EncoderLayers, name: format!("{layers} layers"), config });
    }
    for (alpha, beta) in [(0.25, 0.75), (0.30, 0.70), (0.35, 0.65), (0.40, 0.60), (0.45, 0.55)] {
        let mut config = base.clone();
        config.model.alpha = alpha;
        config.model.beta = beta;
        out.push(Variant { table: SweepTable::LossWeights, name: format!("alpha={alpha:.2} beta={beta:.2}"), config });
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteRow {
    pub table: Option<SweepTable>,
    pub name: String,
    /// `"MFTR"` on rows whose configuration equals the base configuration.
    pub tag: Option<String>,
    pub config_hash: String,
    pub record: Option<RunRecord>,
    /// Test-split scores of the best checkpoint.
    pub report: Option<EvalReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteTable {
    pub rows: Vec<SuiteRow>,
}

impl SuiteTable {
    pub fn baseline(&self) -> Option<&SuiteRow> {
        self.rows.iter().find(|r| r.table.is_none())
    }

    pub fn row(&self, name: &str) -> Option<&SuiteRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// One row per variant with per-horizon AP columns.
    pub fn to_csv(&self) -> String {
        let horizon = self.rows.iter().find_map(|r| r.report.as_ref()).map_or(0, |r| r.horizon());
        let mut out = String::from("table,name,tag,config_hash");
        for k in 1..=horizon {
            out.push_str(&format!(",ap_{k}s"));
        }
        for k in 1..=horizon {
            out.push_str(&format!(",ao_{k}s"));
        }
        out.push_str(",overall_ap,overall_ao,error\n");
        for r in &self.rows {
            let table = r.table.map_or("baseline".to_string(), |t| {
                serde_json::to_value(t).unwrap().as_str().unwrap().to_string()
            });
            out.push_str(&format!("{table},{},{},{}", r.name, r.tag.clone().unwrap_or_default(), r.config_hash));
            match &r.report {
                Some(rep) => {
                    for s in &rep.per_horizon {
                        out.push_str(&format!(",{}", s.ap));
                    }
                    for s in &rep.per_horizon {
                        out.push_str(&format!(",{}", s.ao));
                    }
                    out.push_str(&format!(",{},{}", rep.overall.ap, rep.overall.ao));
                }
                None => out.push_str(&",".repeat(2 * horizon + 2)),
            }
            out.push_str(&format!(",{}\n", r.error.clone().unwrap_or_default().replace(',', ";")));
        }
        out
    }
}

/// Trains the base configuration and every variant, scoring each best
/// checkpoint on the test split. Identical configurations are trained once.
/// A failing run is recorded in its row and the suite continues.
pub fn run_ablation_suite(
    base: &TrainConfig,
    data: &TrainData,
    out_dir: Option<&Path>,
    mut progress: impl FnMut(&SuiteRow),
) -> Result<SuiteTable> {
    base.validate()?;
    let base_hash = base.hash();
    let mut cache: Vec<(String, std::result::Result<(RunRecord, EvalReport), String>)> = Vec::new();
    let mut run = |cfg: &TrainConfig| {
        let hash = cfg.hash();
        if let Some((_, r)) = cache.iter().find(|(h, _)| *h == hash) {
            return (hash, r.clone());
        }
        let dir = out_dir.map(|d| d.join(&hash));
        let result = train(cfg, data, TrainOptions { out_dir: dir.as_deref(), ..Default::default() })
            .and_then(|o| {
                let eval_set = if data.split.test.is_empty() { &data.split.val } else { &data.split.test };
                let report = evaluate(&o.model, eval_set, data.store)?;
                Ok((o.record, report))
            })
            .map_err(|e| e.to_string());
        cache.push((hash.clone(), result.clone()));
        (hash, result)
    };

    let mut rows = Vec::new();
    let entries = std::iter::once((None, "MFTR".to_string(), base.clone()))
        .chain(ablation_variants(base).into_iter().map(|v| (Some(v.table), v.name, v.config)));
    for (table, name, cfg) in entries {
        let (hash, result) = run(&cfg);
        let tag = (hash == base_hash).then(|| "MFTR".to_string());
        let row = match result {
            Ok((record, report)) => SuiteRow { table, name, tag, config_hash: hash, record: Some(record), report: Some(report), error: None },
            Err(e) => SuiteRow { table, name, tag, config_hash: hash, record: None, report: None, error: Some(e) },
        };
        progress(&row);
        rows.push(row);
    }
    let table = SuiteTable { rows };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join("ablation.json");
        std::fs::write(&json, serde_json::to_string_pretty(&table)?).map_err(|e| Error::io(&json, e))?;
        let csv = dir.join("ablation.csv");
        std::fs::write(&csv, table.to_csv()).map_err(|e| Error::io(&csv, e))?;
    }
    Ok(table)
}
