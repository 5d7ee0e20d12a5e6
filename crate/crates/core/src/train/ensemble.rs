use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::run::{check_frames, fit, RunRecord, TrainConfig};
use crate::error::{Error, Result};
use crate::graphmodel::{kfold_split, CounterFrame, RoadGraph};
use crate::model::{Model, ModelConfig};
use crate::numerics::Tensor;

/// How member scores turn into ensemble weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Weighting {
    /// `w ∝ 1/score` when lower is better, `w ∝ score` otherwise.
    Inverse,
    /// `w ∝ exp(∓score/τ)`.
    Softmax { temperature: f64 },
}

/// Normalized weights, larger for better scores.
pub fn ensemble_weights(
    scores: &[f64],
    rule: Weighting,
    lower_is_better: bool,
) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::Invalid("no scores to weight".into()));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Invalid(format!("non-finite score {s}")));
    }
    let raw: Vec<f64> = match rule {
        Weighting::Inverse => {
            if let Some(s) = scores.iter().find(|&&s| s <= 0.0) {
                return Err(Error::Invalid(format!(
                    "inverse weighting needs positive scores, got {s}"
                )));
            }
            scores
                .iter()
                .map(|&s| if lower_is_better { 1.0 / s } else { s })
                .collect()
        }
        Weighting::Softmax { temperature } => {
            if !(temperature.is_finite() && temperature > 0.0) {
                return Err(Error::Invalid(format!(
                    "temperature must be positive, got {temperature}"
                )));
            }
            let sign = if lower_is_better { -1.0 } else { 1.0 };
            let logits: Vec<f64> = scores.iter().map(|s| sign * s / temperature).collect();
            let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            logits.iter().map(|l| (l - top).exp()).collect()
        }
    };
    let total: f64 = raw.iter().sum();
    Ok(raw.iter().map(|w| w / total).collect())
}

/// `Σ w_i·pred_i` with weights from `scores`.
pub fn weighted_ensemble(
    preds: &[Tensor],
    scores: &[f64],
    rule: Weighting,
    lower_is_better: bool,
) -> Result<Tensor> {
    if preds.len() != scores.len() {
        return Err(Error::shape(
            "weighted_ensemble",
            format!("{} predictions, {} scores", preds.len(), scores.len()),
        ));
    }
    let w = ensemble_weights(scores, rule, lower_is_better)?;
    combine(preds, &w)
}

fn combine(preds: &[Tensor], weights: &[f64]) -> Result<Tensor> {
    if preds.len() == 1 {
        return Ok(preds[0].clone());
    }
    let mut out = preds[0].scale(weights[0]);
    for (p, &w) in preds.iter().zip(weights).skip(1) {
        out.axpy(w, p)?;
    }
    Ok(out)
}

/// Models whose predictions are combined with fixed weights: fold averages
/// use equal weights, score-weighted ensembles use [`ensemble_weights`].
#[derive(Clone, Debug)]
pub struct Ensemble {
    pub members: Vec<Model>,
    pub weights: Vec<f64>,
}

impl Ensemble {
    pub fn uniform(members: Vec<Model>) -> Result<Self> {
        let n = members.len();
        Self::new(members, vec![1.0 / n.max(1) as f64; n])
    }

    pub fn new(members: Vec<Model>, weights: Vec<f64>) -> Result<Self> {
        let Some(first) = members.first() else {
            return Err(Error::Invalid("ensemble needs at least one model".into()));
        };
        if weights.len() != members.len() {
            return Err(Error::Invalid(
                "one weight per ensemble member required".into(),
            ));
        }
        for m in &members[1..] {
            let same = m.config.task == first.config.task
                && m.num_nodes() == first.num_nodes()
                && m.num_edges() == first.num_edges()
                && m.num_supersegments() == first.num_supersegments();
            if !same {
                return Err(Error::Invalid(
                    "ensemble members disagree on task or graph".into(),
                ));
            }
        }
        Ok(Self { members, weights })
    }

    /// Combined class probabilities or speeds per frame.
    pub fn predict(&self, frames: &[&CounterFrame]) -> Result<Vec<Tensor>> {
        let per_model: Vec<Vec<Tensor>> = self
            .members
            .iter()
            .map(|m| m.predict(frames))
            .collect::<Result<_>>()?;
        (0..frames.len())
            .map(|f| {
                let preds: Vec<Tensor> = per_model.iter().map(|p| p[f].clone()).collect();
                combine(&preds, &self.weights)
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct KFoldOutcome {
    pub models: Vec<Model>,
    pub records: Vec<RunRecord>,
}

impl KFoldOutcome {
    pub fn ensemble(&self) -> Result<Ensemble> {
        Ensemble::uniform(self.models.clone())
    }
}

/// One model per fold, trained concurrently with per-fold seeds drawn from
/// `seed`. Each fold validates on its holdout. `k = 1` trains on all frames
/// without validation.
pub fn train_kfold(
    cfg: &ModelConfig,
    train: &TrainConfig,
    graph: &RoadGraph,
    frames: &[CounterFrame],
    k: usize,
    seed: u64,
) -> Result<KFoldOutcome> {
    train.validate()?;
    check_frames(frames, graph, cfg.task)?;
    if k == 0 {
        return Err(Error::Config("fold count must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let split_seed: u64 = rng.gen();
    let fold_seeds: Vec<u64> = (0..k).map(|_| rng.gen()).collect();
    let splits: Vec<(Vec<usize>, Vec<usize>)> = if k == 1 {
        vec![((0..frames.len()).collect(), Vec::new())]
    } else {
        kfold_split(frames.len(), k, split_seed)?
            .into_iter()
            .map(|f| (f.train, f.holdout))
            .collect()
    };
    let results: Vec<(Model, RunRecord)> = splits
        .par_iter()
        .zip(fold_seeds.par_iter())
        .enumerate()
        .map(|(i, ((tr, ho), &s))| fit(cfg, train, graph, frames, tr, ho, s, Some(i)))
        .collect::<Result<_>>()?;
    let (models, records) = results.into_iter().unzip();
    Ok(KFoldOutcome { models, records })
}
