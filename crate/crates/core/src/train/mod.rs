//! Losses, AdamW and the training loop.

mod optim;

pub use optim::{adamw_step, clip_grad_norm, global_norm, AdamState, AdamWConfig};

use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Tape, Var};
use crate::data::{Dataset, Example, Target};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Mean squared error over all elements. Shapes must match exactly.
pub fn mse<T: Scalar>(t: &mut Tape<T>, pred: Var, target: Var) -> Result<Var> {
    if t.shape(pred) != t.shape(target) {
        return Err(Error::ShapeMismatch {
            op: "mse",
            lhs: t.shape(pred).to_vec(),
            rhs: t.shape(target).to_vec(),
        });
    }
    let d = t.sub(pred, target)?;
    let sq = t.mul(d, d)?;
    t.mean_all(sq)
}

/// Mean cross-entropy of `[B, K]` logits against class indices.
pub fn cross_entropy<T: Scalar>(t: &mut Tape<T>, logits: Var, targets: &[usize]) -> Result<Var> {
    t.cross_entropy(logits, targets)
}

/// Targets of one batch, split by kind.
#[derive(Clone, Debug, PartialEq)]
pub enum BatchTargets {
    Classes(Vec<usize>),
    Values(Vec<f64>),
}

/// Stacks examples into a `[B, ...]` input and their targets.
pub fn collate<T: Scalar>(batch: &[Example<T>]) -> Result<(Tensor<T>, BatchTargets)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let inputs: Vec<Tensor<T>> = batch.iter().map(|e| e.input.clone()).collect();
    let x = Tensor::stack(&inputs)?;
    let targets = match batch[0].target {
        Target::Class(_) => BatchTargets::Classes(
            batch
                .iter()
                .map(|e| e.target.class())
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| Error::InvalidArgument("mixed target kinds in batch".into()))?,
        ),
        Target::Value(_) => BatchTargets::Values(
            batch
                .iter()
                .map(|e| match e.target {
                    Target::Value(v) => Ok(v),
                    Target::Class(_) => {
                        Err(Error::InvalidArgument("mixed target kinds in batch".into()))
                    }
                })
                .collect::<Result<Vec<_>>>()?,
        ),
    };
    Ok((x, targets))
}

/// Records the model's loss on `t`. Returns `(loss, output)`.
pub fn model_loss<T: Scalar>(
    model: &Model<T>,
    t: &mut Tape<T>,
    v: &[Var],
    input: Tensor<T>,
    targets: &BatchTargets,
    dropout: Option<&mut ChaCha8Rng>,
) -> Result<(Var, Var)> {
    let x = t.constant(input);
    let y = model.forward(t, v, x, dropout)?;
    let loss = match targets {
        BatchTargets::Classes(c) => {
            if model.cfg.classes == 0 {
                return Err(Error::Config("class targets need classes > 0".into()));
            }
            if let Some(&bad) = c.iter().find(|&&c| c >= model.cfg.classes) {
                return Err(Error::InvalidArgument(format!(
                    "label {bad} not below {} classes",
                    model.cfg.classes
                )));
            }
            t.cross_entropy(y, c)?
        }
        BatchTargets::Values(vals) => {
            if model.cfg.classes != 0 {
                return Err(Error::Config("regression targets need classes = 0".into()));
            }
            let target = t.constant(Tensor::from_fn(vec![vals.len()], |i| T::of(vals[i])));
            mse(t, y, target)?
        }
    };
    Ok((loss, y))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub seed: u64,
    /// Global-norm clip threshold; `None` disables clipping.
    pub clip: Option<f64>,
    /// Evaluate on the validation set every this many steps (0 = never).
    pub eval_every: usize,
    /// Stop once validation accuracy reaches this value.
    pub target_accuracy: Option<f64>,
    /// One JSON object per step.
    pub metrics_path: Option<PathBuf>,
    /// One-row CSV summary written at the end.
    pub summary_path: Option<PathBuf>,
    /// Best model by validation metric is saved here.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            weight_decay: 0.01,
            batch_size: 16,
            max_steps: 1000,
            seed: 0,
            clip: Some(1.0),
            eval_every: 100,
            target_accuracy: None,
            metrics_path: None,
            summary_path: None,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..Default::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub wall_ms: f64,
    pub grad_norm: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_accuracy: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalResult {
    pub loss: f64,
    /// `None` for regression.
    pub accuracy: Option<f64>,
    pub samples: usize,
}

impl EvalResult {
    /// Higher is better: accuracy for classification, negative loss otherwise.
    fn score(&self) -> f64 {
        self.accuracy.unwrap_or(-self.loss)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub history: Vec<StepRecord>,
    pub best: Option<(usize, EvalResult)>,
    /// First step whose validation accuracy met the target.
    pub reached_target: Option<usize>,
    pub wall_ms: f64,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.history.iter().map(|r| r.loss).collect()
    }
}

/// Loss and accuracy over a whole dataset without recording gradients.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    data: &dyn Dataset<T>,
    batch_size: usize,
) -> Result<EvalResult> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation set".into()));
    }
    let bs = batch_size.max(1);
    let (mut loss_sum, mut correct, mut classify) = (0.0, 0usize, false);
    let mut start = 0;
    while start < data.len() {
        let end = (start + bs).min(data.len());
        let batch = (start..end)
            .map(|i| data.get(i))
            .collect::<Result<Vec<_>>>()?;
        let (x, targets) = collate(&batch)?;
        let mut t = Tape::new();
        let v = model.bind(&mut t, false);
        let (loss, y) = model_loss(model, &mut t, &v, x, &targets, None)?;
        loss_sum += t.value(loss).item().as_f64() * (end - start) as f64;
        if let BatchTargets::Classes(c) = &targets {
            classify = true;
            let logits = t.value(y);
            let k = logits.shape()[1];
            for (b, &label) in c.iter().enumerate() {
                let row = &logits.data()[b * k..(b + 1) * k];
                if argmax(row) == label {
                    correct += 1;
                }
            }
        }
        start = end;
    }
    let n = data.len();
    Ok(EvalResult {
        loss: loss_sum / n as f64,
        accuracy: classify.then(|| correct as f64 / n as f64),
        samples: n,
    })
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Trains `model` in place with AdamW. Batches are drawn from per-epoch
/// shuffles seeded by `cfg.seed`, so runs are bitwise reproducible.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    train_data: &dyn Dataset<T>,
    val_data: Option<&dyn Dataset<T>>,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if train_data.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    if !(cfg.lr >= 0.0 && cfg.lr.is_finite()) || !(cfg.weight_decay >= 0.0) {
        return Err(Error::Config(format!(
            "lr {} and weight_decay {} must be finite and non-negative",
            cfg.lr, cfg.weight_decay
        )));
    }
    let mut metrics = match &cfg.metrics_path {
        Some(p) => {
            if let Some(dir) = p.parent() {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            Some((fs::File::create(p).map_err(|e| Error::io(p, e))?, p.clone()))
        }
        None => None,
    };

    let opt = cfg.adamw();
    let mut state = AdamState::new(model.params.tensors());
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(1);
    let use_dropout = model.cfg.dropout > 0.0;

    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let clock = Instant::now();
    let mut report = TrainReport {
        history: Vec::with_capacity(cfg.max_steps),
        best: None,
        reached_target: None,
        wall_ms: 0.0,
    };

    for step in 1..=cfg.max_steps {
        let mut idx = Vec::with_capacity(cfg.batch_size);
        while idx.len() < cfg.batch_size {
            if cursor == order.len() {
                order = (0..train_data.len()).collect();
                order.shuffle(&mut order_rng);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let batch = idx
            .iter()
            .map(|&i| train_data.get(i))
            .collect::<Result<Vec<_>>>()?;
        let (x, targets) = collate(&batch)?;

        let mut t = Tape::new();
        let v = model.bind(&mut t, true);
        let drop = if use_dropout {
            Some(&mut dropout_rng)
        } else {
            None
        };
        let (loss, _) = model_loss(model, &mut t, &v, x, &targets, drop)?;
        let loss_value = t.value(loss).item().as_f64();
        t.backward(loss)?;
        let mut grads: Vec<Option<Tensor<T>>> = v.iter().map(|&p| t.take_grad(p)).collect();
        drop_frozen(model, &mut grads);
        let grad_norm = match cfg.clip {
            Some(c) => clip_grad_norm(&mut grads, c),
            None => global_norm(&grads),
        };
        adamw_step(model.params.tensors_mut(), &grads, &mut state, &opt)?;

        let mut rec = StepRecord {
            step,
            loss: loss_value,
            lr: cfg.lr,
            wall_ms: clock.elapsed().as_secs_f64() * 1e3,
            grad_norm,
            val_loss: None,
            val_accuracy: None,
        };
        let mut stop = false;
        if let Some(val) = val_data {
            if cfg.eval_every > 0 && (step % cfg.eval_every == 0 || step == cfg.max_steps) {
                let ev = evaluate(model, val, cfg.batch_size)?;
                rec.val_loss = Some(ev.loss);
                rec.val_accuracy = ev.accuracy;
                let improved = report.best.is_none_or(|(_, b)| ev.score() > b.score());
                if improved {
                    report.best = Some((step, ev));
                    if let Some(dir) = &cfg.checkpoint_dir {
                        model.save(dir)?;
                    }
                }
                if let (Some(goal), Some(acc)) = (cfg.target_accuracy, ev.accuracy) {
                    if acc >= goal {
                        report.reached_target = Some(step);
                        stop = true;
                    }
                }
            }
        }
        if let Some((f, p)) = metrics.as_mut() {
            let line = serde_json::to_string(&rec)?;
            writeln!(f, "{line}").map_err(|e| Error::io(p.as_path(), e))?;
        }
        report.history.push(rec);
        if stop {
            break;
        }
    }
    report.wall_ms = clock.elapsed().as_secs_f64() * 1e3;
    if let Some(p) = &cfg.summary_path {
        write_summary(p, &report)?;
    }
    Ok(report)
}

fn drop_frozen<T: Scalar>(model: &Model<T>, grads: &mut [Option<Tensor<T>>]) {
    for (i, g) in grads.iter_mut().enumerate() {
        if model.params.is_frozen(i) {
            *g = None;
        }
    }
}

fn write_summary(path: &std::path::Path, r: &TrainReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "steps",
        "final_loss",
        "best_step",
        "best_val_loss",
        "best_val_accuracy",
        "reached_target",
        "wall_ms",
    ])?;
    let opt = |v: Option<String>| v.unwrap_or_default();
    let last = r.history.last().map(|h| h.loss).unwrap_or(f64::NAN);
    w.write_record([
        r.history.len().to_string(),
        last.to_string(),
        opt(r.best.map(|(s, _)| s.to_string())),
        opt(r.best.map(|(_, e)| e.loss.to_string())),
        opt(r.best.and_then(|(_, e)| e.accuracy).map(|a| a.to_string())),
        opt(r.reached_target.map(|s| s.to_string())),
        format!("{:.1}", r.wall_ms),
    ])?;
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
