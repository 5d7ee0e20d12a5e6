use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::adamw::AdamW;
use super::metrics::{evaluate, Metrics};
use crate::encoder::EdgeFeatureEncoder;
use crate::error::{Error, Result};
use crate::graphmodel::{CounterFrame, RoadGraph};
use crate::heads::ClassWeights;
use crate::model::{Model, ModelConfig, Task};
use crate::nn::Noise;
use crate::numerics::Tensor;
use crate::preprocess::fit_stats;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Average parameters over the last `k` epochs.
    pub average_k: Option<usize>,
    /// Held-out share for single runs; folds use their own holdout.
    pub val_fraction: f64,
    /// Overrides inverse-frequency weights for the congestion loss.
    pub class_weights: Option<ClassWeights>,
}

impl TrainConfig {
    /// 20 epochs, batch 2, lr 1e-3, weight decay 1e-3.
    pub fn core() -> Self {
        Self {
            epochs: 20,
            batch_size: 2,
            lr: 1e-3,
            weight_decay: 1e-3,
            average_k: None,
            val_fraction: 0.1,
            class_weights: None,
        }
    }

    /// 50 epochs, batch 2, lr 1e-4, last-10 averaging.
    pub fn extended() -> Self {
        Self {
            epochs: 50,
            lr: 1e-4,
            average_k: Some(10),
            ..Self::core()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "epochs and batch size must be positive".into(),
            ));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!(
                "val fraction must be in [0, 1), got {}",
                self.val_fraction
            )));
        }
        match self.average_k {
            Some(0) => Err(Error::Config("average k must be positive".into())),
            Some(k) if k > self.epochs => Err(Error::Config(format!(
                "averaging the last {k} epochs needs at least {k} epochs, got {}",
                self.epochs
            ))),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train: f64,
    pub val: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunRecord {
    pub fold: Option<usize>,
    pub epochs: Vec<EpochLoss>,
    /// Weighted CE or MAE of the final model on the held-out frames.
    pub val_score: Option<f64>,
    pub checkpoints: Vec<PathBuf>,
}

impl RunRecord {
    /// `epoch <n> train <loss> val <loss>` lines, `-` for a missing value,
    /// preceded by `#` metadata lines.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        if let Some(f) = self.fold {
            let _ = writeln!(out, "# fold {f}");
        }
        if let Some(s) = self.val_score {
            let _ = writeln!(out, "# val_score {s}");
        }
        for c in &self.checkpoints {
            let _ = writeln!(out, "# checkpoint {}", c.display());
        }
        for e in &self.epochs {
            let val = e.val.map_or_else(|| "-".to_string(), |v| v.to_string());
            let _ = writeln!(out, "epoch {} train {} val {}", e.epoch, e.train, val);
        }
        out
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut rec = RunRecord::default();
        for (i, line) in text.lines().enumerate() {
            let ln = i + 1;
            let bad = |msg: &str| Error::parse(origin, ln, msg);
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(meta) = line.strip_prefix('#') {
                let meta = meta.trim();
                if let Some(v) = meta.strip_prefix("fold ") {
                    rec.fold = Some(v.trim().parse().map_err(|_| bad("bad fold"))?);
                } else if let Some(v) = meta.strip_prefix("val_score ") {
                    rec.val_score = Some(v.trim().parse().map_err(|_| bad("bad val_score"))?);
                } else if let Some(v) = meta.strip_prefix("checkpoint ") {
                    rec.checkpoints.push(PathBuf::from(v.trim()));
                }
                continue;
            }
            let t: Vec<&str> = line.split_whitespace().collect();
            if t.len() != 6 || t[0] != "epoch" || t[2] != "train" || t[4] != "val" {
                return Err(bad("expected `epoch <n> train <loss> val <loss>`"));
            }
            let epoch: usize = t[1].parse().map_err(|_| bad("bad epoch number"))?;
            if epoch != rec.epochs.len() + 1 {
                return Err(bad(&format!("epoch {epoch} out of sequence")));
            }
            let train: f64 = t[3].parse().map_err(|_| bad("bad train loss"))?;
            let val = match t[5] {
                "-" => None,
                v => Some(v.parse().map_err(|_| bad("bad val loss"))?),
            };
            rec.epochs.push(EpochLoss { epoch, train, val });
        }
        Ok(rec)
    }
}

/// Elementwise mean of the last `k` parameter snapshots.
///
/// Uses the running form `m += (x − m)/i`, so averaging identical snapshots
/// returns them unchanged.
pub fn average_last_k(snapshots: &[Vec<Tensor>], k: usize) -> Result<Vec<Tensor>> {
    if k == 0 || snapshots.len() < k {
        return Err(Error::Invalid(format!(
            "averaging last {k} checkpoints needs at least {k}, have {}",
            snapshots.len()
        )));
    }
    let tail = &snapshots[snapshots.len() - k..];
    let mut mean = tail[0].clone();
    for (i, snap) in tail.iter().enumerate().skip(1) {
        if snap.len() != mean.len() {
            return Err(Error::shape(
                "average_last_k",
                "snapshots differ in tensor count",
            ));
        }
        let n = (i + 1) as f64;
        for (m, x) in mean.iter_mut().zip(snap) {
            m.expect_same_shape(x, "average_last_k")?;
            for (a, b) in m.data_mut().iter_mut().zip(x.data()) {
                *a += (b - *a) / n;
            }
        }
    }
    Ok(mean)
}

/// Result of one training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub record: RunRecord,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
}

pub(crate) fn check_frames(frames: &[CounterFrame], graph: &RoadGraph, task: Task) -> Result<()> {
    if frames.is_empty() {
        return Err(Error::Invalid("dataset is empty".into()));
    }
    for (i, f) in frames.iter().enumerate() {
        f.validate(graph)
            .map_err(|e| Error::Invalid(format!("frame {i}: {e}")))?;
        let labeled = match task {
            Task::Congestion => f.classes.is_some(),
            Task::Speed => f.speeds.is_some(),
        };
        if !labeled {
            return Err(Error::Invalid(format!("frame {i} has no {task} labels")));
        }
    }
    Ok(())
}

/// Model initialized from training-split statistics.
pub fn init_model(
    cfg: &ModelConfig,
    train: &TrainConfig,
    graph: &RoadGraph,
    frames: &[&CounterFrame],
    seed: u64,
) -> Result<Model> {
    let stats = fit_stats(frames.iter().copied())?;
    let weights = match (cfg.task, train.class_weights) {
        (_, Some(w)) => w,
        (Task::Congestion, None) => {
            ClassWeights::inverse_frequency(frames.iter().flat_map(|f| f.classes.iter().flatten()))?
        }
        (Task::Speed, None) => ClassWeights::UNIFORM,
    };
    let mut model = Model::new(
        *cfg,
        graph,
        stats,
        EdgeFeatureEncoder::fit(graph),
        weights,
        seed,
    )?;
    if cfg.task == Task::Speed {
        let speeds: Vec<f64> = frames
            .iter()
            .flat_map(|f| f.speeds.iter().flatten().copied())
            .collect();
        if !speeds.is_empty() {
            model.set_speed_offset(speeds.iter().sum::<f64>() / speeds.len() as f64);
        }
    }
    Ok(model)
}

fn with_context(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::Numeric { location, detail } => Error::Numeric {
            location: format!("epoch {epoch}, batch {batch}, {location}"),
            detail,
        },
        other => other,
    }
}

/// Eval-mode loss averaged over frames, in chunks of `chunk`.
pub fn mean_eval_loss(model: &Model, frames: &[&CounterFrame], chunk: usize) -> Result<f64> {
    let mut total = 0.0;
    for c in frames.chunks(chunk.max(1)) {
        total += model.eval_loss(c)? * c.len() as f64;
    }
    Ok(total / frames.len() as f64)
}

/// Trains one model on `train_idx`, validating on `val_idx` every epoch.
pub fn fit(
    cfg: &ModelConfig,
    train: &TrainConfig,
    graph: &RoadGraph,
    frames: &[CounterFrame],
    train_idx: &[usize],
    val_idx: &[usize],
    seed: u64,
    fold: Option<usize>,
) -> Result<(Model, RunRecord)> {
    train.validate()?;
    if train_idx.is_empty() {
        return Err(Error::Invalid("training split is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train_frames: Vec<&CounterFrame> = train_idx.iter().map(|&i| &frames[i]).collect();
    let val_frames: Vec<&CounterFrame> = val_idx.iter().map(|&i| &frames[i]).collect();
    let mut model = init_model(cfg, train, graph, &train_frames, rng.gen())?;
    let mut opt = AdamW::new(train.lr, train.weight_decay);
    let keep = train.average_k.unwrap_or(0);
    let mut snapshots: VecDeque<Vec<Tensor>> = VecDeque::with_capacity(keep);
    let mut record = RunRecord {
        fold,
        ..RunRecord::default()
    };
    let mut order: Vec<usize> = (0..train_frames.len()).collect();
    for epoch in 1..=train.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (b, chunk) in order.chunks(train.batch_size).enumerate() {
            let batch: Vec<&CounterFrame> = chunk.iter().map(|&i| train_frames[i]).collect();
            let mut noise = Noise::train(rng.gen());
            let (loss, grads) = model
                .loss_and_grads(&batch, &mut noise)
                .map_err(|e| with_context(e, epoch, b + 1))?;
            opt.step(model.params.tensors_mut(), &grads)?;
            if !model.params.tensors().iter().all(Tensor::is_finite) {
                return Err(Error::Numeric {
                    location: format!("epoch {epoch}, batch {}", b + 1),
                    detail: "non-finite parameters after update".into(),
                });
            }
            epoch_loss += loss * batch.len() as f64;
        }
        let val = if val_frames.is_empty() {
            None
        } else {
            Some(mean_eval_loss(&model, &val_frames, train.batch_size)?)
        };
        record.epochs.push(EpochLoss {
            epoch,
            train: epoch_loss / train_frames.len() as f64,
            val,
        });
        if keep > 0 {
            if snapshots.len() == keep {
                snapshots.pop_front();
            }
            snapshots.push_back(model.params.tensors().to_vec());
        }
    }
    if let Some(k) = train.average_k {
        let snaps: Vec<Vec<Tensor>> = snapshots.into_iter().collect();
        model.params.assign(average_last_k(&snaps, k)?)?;
    }
    if !val_frames.is_empty() {
        let preds = model.predict(&val_frames)?;
        record.val_score =
            Some(evaluate(&preds, &val_frames, cfg.task, &model.class_weights)?.score());
    }
    Ok((model, record))
}

/// Seeded shuffle, hold out `val_fraction` of frames (at least one training
/// frame stays), train and validate.
pub fn train_run(
    cfg: &ModelConfig,
    train: &TrainConfig,
    graph: &RoadGraph,
    frames: &[CounterFrame],
    seed: u64,
) -> Result<TrainOutcome> {
    train.validate()?;
    check_frames(frames, graph, cfg.task)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..frames.len()).collect();
    idx.shuffle(&mut rng);
    let n_val = ((frames.len() as f64 * train.val_fraction).round() as usize).min(frames.len() - 1);
    let val_indices = idx[..n_val].to_vec();
    let train_indices = idx[n_val..].to_vec();
    let (model, record) = fit(
        cfg,
        train,
        graph,
        frames,
        &train_indices,
        &val_indices,
        rng.gen(),
        None,
    )?;
    Ok(TrainOutcome {
        model,
        record,
        train_indices,
        val_indices,
    })
}

/// Metrics of `model` on the frames at `idx`.
pub fn evaluate_model(model: &Model, frames: &[CounterFrame], idx: &[usize]) -> Result<Metrics> {
    let sel: Vec<&CounterFrame> = idx.iter().map(|&i| &frames[i]).collect();
    let preds = model.predict(&sel)?;
    evaluate(&preds, &sel, model.config.task, &model.class_weights)
}
