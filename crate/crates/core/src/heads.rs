//! Prediction heads and their losses.

use rand::Rng;

use crate::encoder::{GatLayer, GatTopology};
use crate::error::{Error, Result};
use crate::graphmodel::Congestion;
use crate::nn::{Linear, Noise, ParamSet, Session, LEAKY_SLOPE};
use crate::numerics::{Tensor, Var};

/// Dropout rate on the inputs of the three head layers.
pub const HEAD_DROPOUT: f64 = 0.2;

pub const DEFAULT_HIDDEN: (usize, usize) = (256, 64);

/// Per-class loss weights, indexed by [`Congestion::index`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassWeights(pub [f64; 3]);

impl ClassWeights {
    pub const UNIFORM: ClassWeights = ClassWeights([1.0; 3]);

    pub fn new(w: [f64; 3]) -> Result<Self> {
        if w.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(Error::Invalid(format!(
                "class weights must be positive, got {w:?}"
            )));
        }
        Ok(Self(w))
    }

    /// Inverse class frequency, rescaled to mean 1. Absent classes get the
    /// largest observed weight.
    pub fn inverse_frequency<'a>(
        labels: impl IntoIterator<Item = &'a Option<Congestion>>,
    ) -> Result<Self> {
        let mut counts = [0usize; 3];
        for c in labels.into_iter().flatten() {
            counts[c.index()] += 1;
        }
        if counts.iter().all(|&c| c == 0) {
            return Err(Error::Invalid("no congestion labels to weight".into()));
        }
        let inv: Vec<Option<f64>> = counts
            .iter()
            .map(|&c| (c > 0).then(|| 1.0 / c as f64))
            .collect();
        let top = inv.iter().flatten().copied().fold(0.0, f64::max);
        let raw: Vec<f64> = inv.iter().map(|v| v.unwrap_or(top)).collect();
        let mean = raw.iter().sum::<f64>() / 3.0;
        Self::new([raw[0] / mean, raw[1] / mean, raw[2] / mean])
    }
}

/// Three affine layers with leaky ReLU between and dropout on each input.
/// An optional side input is concatenated after the first layer.
#[derive(Clone, Debug)]
pub struct Mlp3 {
    pub layers: [Linear; 3],
    pub dropout: bool,
}

impl Mlp3 {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        widths: [usize; 4],
        side: usize,
        dropout: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if widths.contains(&0) {
            return Err(Error::Config(format!(
                "zero width in head `{name}`: {widths:?}"
            )));
        }
        Ok(Self {
            layers: [
                Linear::new(params, &format!("{name}.fc1"), widths[0], widths[1], rng)?,
                Linear::new(
                    params,
                    &format!("{name}.fc2"),
                    widths[1] + side,
                    widths[2],
                    rng,
                )?,
                Linear::new(params, &format!("{name}.fc3"), widths[2], widths[3], rng)?,
            ],
            dropout,
        })
    }

    pub fn forward(
        &self,
        s: &mut Session,
        x: Var,
        side: Option<Var>,
        noise: &mut Noise,
    ) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                h = s.tape.leaky_relu(h, LEAKY_SLOPE);
            }
            if i == 1 {
                if let Some(extra) = side {
                    h = s.tape.concat_cols(&[h, extra])?;
                }
            }
            if self.dropout && noise.training {
                let seed = noise.next_seed();
                h = s.tape.dropout(h, HEAD_DROPOUT, true, seed)?;
            }
            h = layer.forward(s, h)?;
        }
        Ok(h)
    }
}

/// `x_c → |E|×3` logits.
#[derive(Clone, Debug)]
pub struct CongestionHead {
    pub mlp: Mlp3,
}

impl CongestionHead {
    pub fn new(
        params: &mut ParamSet,
        in_width: usize,
        hidden: (usize, usize),
        dropout: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mlp = Mlp3::new(
            params,
            "head.congestion",
            [in_width, hidden.0, hidden.1, 3],
            0,
            dropout,
            rng,
        )?;
        Ok(Self { mlp })
    }

    pub fn forward(&self, s: &mut Session, x_c: Var, noise: &mut Noise) -> Result<Var> {
        self.mlp.forward(s, x_c, None, noise)
    }
}

/// `x_s → |S|×1` speeds, optionally with a GATv2 layer over the
/// super-segment graph joined after the first layer.
#[derive(Clone, Debug)]
pub struct SpeedHead {
    pub mlp: Mlp3,
    pub segment_conv: Option<GatLayer>,
}

impl SpeedHead {
    pub fn new(
        params: &mut ParamSet,
        in_width: usize,
        hidden: (usize, usize),
        conv_dim: Option<usize>,
        heads: usize,
        dropout: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let segment_conv = match conv_dim {
            Some(d) => Some(GatLayer::new(
                params,
                "head.speed.segment_conv",
                in_width,
                d,
                None,
                heads,
                rng,
            )?),
            None => None,
        };
        let side = conv_dim.unwrap_or(0);
        let mlp = Mlp3::new(
            params,
            "head.speed",
            [in_width, hidden.0, hidden.1, 1],
            side,
            dropout,
            rng,
        )?;
        Ok(Self { mlp, segment_conv })
    }

    pub fn forward(
        &self,
        s: &mut Session,
        x_s: Var,
        topo: Option<&GatTopology>,
        noise: &mut Noise,
    ) -> Result<Var> {
        let side = match (&self.segment_conv, topo) {
            (Some(gat), Some(t)) => Some(gat.forward(s, x_s, t, None)?.out),
            (Some(_), None) => {
                return Err(Error::Config(
                    "segment conv needs a super-segment graph".into(),
                ))
            }
            (None, _) => None,
        };
        self.mlp.forward(s, x_s, side, noise)
    }
}

fn label_weights(
    labels: &[Option<Congestion>],
    weights: &ClassWeights,
    rows: usize,
) -> Result<(Tensor, usize)> {
    if labels.len() != rows {
        return Err(Error::shape(
            "weighted_ce",
            format!("{} labels for {rows} logit rows", labels.len()),
        ));
    }
    let mut sel = Tensor::zeros(rows, 3);
    let mut n = 0;
    for (i, l) in labels.iter().enumerate() {
        if let Some(c) = l {
            sel.set(i, c.index(), weights.0[c.index()]);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Invalid(
            "weighted cross-entropy needs a labeled edge".into(),
        ));
    }
    Ok((sel, n))
}

/// `−(1/|E′|)·Σ_{i∈E′} w_{y_i}·log softmax(logits_i)[y_i]`; unlabeled edges
/// are skipped.
pub fn loss_weighted_ce(
    s: &mut Session,
    logits: Var,
    labels: &[Option<Congestion>],
    weights: &ClassWeights,
) -> Result<Var> {
    let [rows, cols] = s.value(logits).shape();
    if cols != 3 {
        return Err(Error::shape("weighted_ce", format!("{cols} logit columns")));
    }
    let (sel, n) = label_weights(labels, weights, rows)?;
    let logp = s.tape.log_softmax_rows(logits);
    let sel = s.tape.constant(sel);
    let picked = s.tape.mul(logp, sel)?;
    let total = s.tape.sum(picked);
    Ok(s.tape.scale(total, -1.0 / n as f64))
}

/// Value-only form of [`loss_weighted_ce`] on class probabilities.
pub fn weighted_ce_from_probs(
    probs: &Tensor,
    labels: &[Option<Congestion>],
    weights: &ClassWeights,
) -> Result<f64> {
    let (sel, n) = label_weights(labels, weights, probs.rows())?;
    let total: f64 = sel
        .data()
        .iter()
        .zip(probs.data())
        .filter(|(w, _)| **w != 0.0)
        .map(|(w, p)| w * p.ln())
        .sum();
    Ok(-total / n as f64)
}

/// Mean absolute error between `pred` (`|S|×1`) and `target`.
pub fn loss_l1(s: &mut Session, pred: Var, target: &[f64]) -> Result<Var> {
    let [rows, cols] = s.value(pred).shape();
    if cols != 1 || rows != target.len() {
        return Err(Error::shape(
            "l1",
            format!("prediction {rows}x{cols} vs {} targets", target.len()),
        ));
    }
    if rows == 0 {
        return Err(Error::Invalid("L1 loss over zero super-segments".into()));
    }
    let t = s.tape.constant(Tensor::new(rows, 1, target.to_vec())?);
    let d = s.tape.sub(pred, t)?;
    let a = s.tape.abs(d);
    Ok(s.tape.mean(a))
}

pub fn mae(pred: &Tensor, target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() || target.is_empty() {
        return Err(Error::shape(
            "mae",
            format!("{} predictions vs {} targets", pred.len(), target.len()),
        ));
    }
    Ok(pred
        .data()
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t).abs())
        .sum::<f64>()
        / target.len() as f64)
}

/// `L_r + head_loss`, plus `β·KL` when `beta` is nonzero.
pub fn total_loss(s: &mut Session, recon: Var, head: Var, kl: Var, beta: f64) -> Result<Var> {
    let mut l = s.tape.add(recon, head)?;
    if beta != 0.0 {
        let k = s.tape.scale(kl, beta);
        l = s.tape.add(l, k)?;
    }
    Ok(l)
}
