//! Regression training of the scoring model.

use std::path::Path;
use std::time::Instant;

use ndarray::Axis;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Labeled;
use crate::dsarcnet::{batch_inputs, build_dsarcnet, configure_ablation, CellInput, DSarcNet, DSarcNetConfig};
use crate::error::{Error, Result};
use crate::metrics::{self, EvalReport, SamplePrediction};
use crate::nn::{Adam, Checkpoint, Mode, Module, Param, Tensor};

/// One labeled model input.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub input: CellInput,
    pub label: f64,
}

impl Labeled for TrainSample {
    fn id(&self) -> &str {
        &self.input.id
    }
    fn label(&self) -> Option<f64> {
        Some(self.label)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Cosine decay from `lr` to zero over the run, stepped per epoch.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub schedule: LrSchedule,
    /// L2 penalty added to the gradient of every trainable parameter.
    pub weight_decay: f64,
    /// Random horizontal and vertical flips of both inputs.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-5,
            batch_size: 64,
            epochs: 100,
            seed: 1,
            schedule: LrSchedule::Constant,
            weight_decay: 0.0,
            augment: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be ≥ 1".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight decay must be ≥ 0, got {}", self.weight_decay)));
        }
        Ok(())
    }

    /// Reads a TOML file whose keys mirror the struct fields; missing keys keep their defaults.
    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: TrainConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => 0.5 * self.lr * (1.0 + (std::f64::consts::PI * epoch as f64 / self.epochs as f64).cos()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Metrics on the validation split with clamped predictions, if one was given.
    pub val: Option<ValMetrics>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValMetrics {
    pub spearman: Option<f64>,
    pub mae: f64,
    pub mse: f64,
    pub r2: f64,
}

impl From<&EvalReport> for ValMetrics {
    fn from(r: &EvalReport) -> Self {
        ValMetrics { spearman: r.spearman, mae: r.mae, mse: r.mse, r2: r.r2 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose weights were kept: best validation MSE, or the
    /// last epoch without a validation split. `None` after zero epochs.
    pub selected_epoch: Option<usize>,
}

impl TrainHistory {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }
}

pub struct TrainOutcome {
    pub history: TrainHistory,
    /// Weights of the selected epoch, also loaded into the model.
    pub checkpoint: Checkpoint,
}

/// Three decimals, or `undefined`.
pub fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".into(), |x| format!("{x:.3}"))
}

/// Mean squared error of a batch.
pub fn mse_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.is_empty() {
        return Err(Error::Empty("loss over an empty batch".into()));
    }
    metrics::mse(pred, target)
}

/// Metrics over `samples` using clamped predictions.
pub fn evaluate(model: &mut DSarcNet, samples: &[TrainSample]) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Empty("no samples to evaluate".into()));
    }
    let inputs: Vec<CellInput> = samples.iter().map(|s| s.input.clone()).collect();
    let preds = model.predict_cells(&inputs)?;
    EvalReport::from_predictions(
        samples
            .iter()
            .zip(preds)
            .map(|(s, p)| SamplePrediction { id: s.input.id.clone(), label: s.label, prediction: p.clamped })
            .collect(),
    )
}

fn flipped(cell: &CellInput, rng: &mut ChaCha8Rng) -> CellInput {
    let mut out = cell.clone();
    if rng.random::<bool>() {
        out.raw.invert_axis(Axis(1));
        out.stack.invert_axis(Axis(2));
    }
    if rng.random::<bool>() {
        out.raw.invert_axis(Axis(0));
        out.stack.invert_axis(Axis(1));
    }
    out
}

fn apply_weight_decay(model: &mut DSarcNet, wd: f64) {
    let wd = wd as f32;
    model.visit(&mut |p: &mut Param<f32>| {
        if p.trainable {
            for i in 0..p.len() {
                let v = p.value[i];
                p.grad_mut()[i] += wd * v;
            }
        }
    });
}

/// Adam on the MSE of raw (unclamped) outputs. Each epoch shuffles the
/// training set with a seeded generator and keeps the last partial batch.
pub fn train(
    model: &mut DSarcNet,
    train: &[TrainSample],
    val: &[TrainSample],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training set is empty".into()));
    }
    for s in train.iter().chain(val) {
        s.input.validate()?;
    }
    let extra = serde_json::json!({ "train": config });
    let mut history = TrainHistory::default();
    let mut opt = Adam::new(config.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, Checkpoint)> = None;

    for epoch in 0..config.epochs {
        let start = Instant::now();
        opt.lr = config.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
            let cells: Vec<CellInput>;
            let refs: Vec<&CellInput> = if config.augment {
                cells = chunk.iter().map(|&i| flipped(&train[i].input, &mut rng)).collect();
                cells.iter().collect()
            } else {
                chunk.iter().map(|&i| &train[i].input).collect()
            };
            let (raw, stack) = batch_inputs::<f32>(&refs);
            model.zero_grad();
            let out = model.forward(raw, stack, Mode::Train).map_err(|e| match e {
                Error::Diverged(m) => Error::Diverged(format!("epoch {}, batch {}: {m}", epoch + 1, bi + 1)),
                other => other,
            })?;
            let pred: Vec<f64> = out.data().iter().map(|&v| v as f64).collect();
            let target: Vec<f64> = chunk.iter().map(|&i| train[i].label).collect();
            let loss = mse_loss(&pred, &target)?;
            if !loss.is_finite() {
                return Err(Error::Diverged(format!("non-finite loss in epoch {}, batch {}", epoch + 1, bi + 1)));
            }
            loss_sum += loss * chunk.len() as f64;
            let n = chunk.len() as f64;
            let dy: Vec<f32> = pred.iter().zip(&target).map(|(p, t)| (2.0 * (p - t) / n) as f32).collect();
            model.backward(Tensor::from_vec(&[chunk.len(), 1], dy));
            if config.weight_decay > 0.0 {
                apply_weight_decay(model, config.weight_decay);
            }
            opt.step(model);
        }
        let report = if val.is_empty() { None } else { Some(evaluate(model, val)?) };
        let record = EpochRecord {
            epoch: epoch + 1,
            lr: opt.lr,
            train_loss: loss_sum / train.len() as f64,
            val: report.as_ref().map(ValMetrics::from),
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {}: train mse {:.4}{} ({:.1}s)",
            record.epoch,
            record.train_loss,
            record
                .val
                .map(|v| format!(", val mse {:.4} spearman {}", v.mse, fmt_opt(v.spearman)))
                .unwrap_or_default(),
            record.seconds
        );
        history.epochs.push(record);
        if let Some(r) = report {
            if best.as_ref().is_none_or(|(b, _)| r.mse < *b) {
                best = Some((r.mse, model.checkpoint(extra.clone())));
                history.selected_epoch = Some(epoch + 1);
            }
        }
    }
    let checkpoint = match best {
        Some((_, ck)) => {
            ck.restore(model)?;
            ck
        }
        None => {
            if config.epochs > 0 {
                history.selected_epoch = Some(config.epochs);
            }
            model.checkpoint(extra)
        }
    };
    Ok(TrainOutcome { history, checkpoint })
}

/// One row of an ablation comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    /// `None` when the variant's test predictions are constant.
    pub spearman: Option<f64>,
    pub mae: f64,
    pub mse: f64,
    pub r2: f64,
    pub selected_epoch: Option<usize>,
    pub train_seconds: f64,
}

/// Trains every variant from scratch with the same data and settings and
/// evaluates it on `test`. Variants run sequentially.
pub fn run_ablation(
    base: &DSarcNetConfig,
    variants: &[&str],
    train_set: &[TrainSample],
    val: &[TrainSample],
    test: &[TrainSample],
    config: &TrainConfig,
) -> Result<Vec<AblationRow>> {
    let configs = variants
        .iter()
        .map(|v| configure_ablation(base, v).map(|c| (v.to_string(), c)))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(configs.len());
    for (variant, cfg) in configs {
        log::info!("ablation variant {variant}");
        let mut model = build_dsarcnet::<f32>(&cfg)?;
        let start = Instant::now();
        let outcome = train(&mut model, train_set, val, config)?;
        let train_seconds = start.elapsed().as_secs_f64();
        let report = evaluate(&mut model, test)?;
        rows.push(AblationRow {
            variant,
            spearman: report.spearman,
            mae: report.mae,
            mse: report.mse,
            r2: report.r2,
            selected_epoch: outcome.history.selected_epoch,
            train_seconds,
        });
    }
    Ok(rows)
}

/// Writes the rows as CSV and as a JSON array.
pub fn write_ablation_table(rows: &[AblationRow], csv_path: &Path, json_path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(csv_path).map_err(|e| Error::Input(format!("{}: {e}", csv_path.display())))?;
    for row in rows {
        w.serialize(row).map_err(|e| Error::Input(format!("{}: {e}", csv_path.display())))?;
    }
    w.flush().map_err(|e| Error::io(csv_path, e))?;
    std::fs::write(json_path, serde_json::to_string_pretty(rows)?).map_err(|e| Error::io(json_path, e))
}
