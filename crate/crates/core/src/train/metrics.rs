use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::graphmodel::{Congestion, CounterFrame};
use crate::heads::ClassWeights;
use crate::model::Task;
use crate::numerics::Tensor;

/// Probabilities below this are clamped before taking logs.
const MIN_PROB: f64 = 1e-300;

/// Evaluation summary. Congestion fields are zero for the speed task and
/// vice versa.
#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub task: Task,
    /// Labeled edges or super-segments scored.
    pub count: usize,
    /// Class-weighted CE with the training weights; the headline score.
    pub weighted_ce: f64,
    pub ce: f64,
    pub accuracy: f64,
    /// Per class (red, yellow, green); 0 when the class is never predicted.
    pub precision: [f64; 3],
    /// Per class; 0 when the class never occurs.
    pub recall: [f64; 3],
    pub mae: f64,
}

impl Metrics {
    /// Lower is better: weighted CE or MAE.
    pub fn score(&self) -> f64 {
        match self.task {
            Task::Congestion => self.weighted_ce,
            Task::Speed => self.mae,
        }
    }

    pub fn report(&self) -> String {
        let mut out = String::new();
        match self.task {
            Task::Congestion => {
                let _ = writeln!(out, "labeled_edges {}", self.count);
                let _ = writeln!(out, "weighted_ce {}", self.weighted_ce);
                let _ = writeln!(out, "ce {}", self.ce);
                let _ = writeln!(out, "accuracy {}", self.accuracy);
                for c in Congestion::ALL {
                    let i = c.index();
                    let _ = writeln!(
                        out,
                        "class {} precision {} recall {}",
                        c.token(),
                        self.precision[i],
                        self.recall[i]
                    );
                }
            }
            Task::Speed => {
                let _ = writeln!(out, "supersegments {}", self.count);
                let _ = writeln!(out, "mae {}", self.mae);
            }
        }
        out
    }
}

/// Scores per-frame predictions (class probabilities `|E|×3` or speeds
/// `|S|×1`) against the frames' labels.
pub fn evaluate(
    preds: &[Tensor],
    frames: &[&CounterFrame],
    task: Task,
    weights: &ClassWeights,
) -> Result<Metrics> {
    if preds.len() != frames.len() {
        return Err(Error::shape(
            "evaluate",
            format!("{} predictions for {} frames", preds.len(), frames.len()),
        ));
    }
    let mut m = Metrics {
        task,
        count: 0,
        weighted_ce: 0.0,
        ce: 0.0,
        accuracy: 0.0,
        precision: [0.0; 3],
        recall: [0.0; 3],
        mae: 0.0,
    };
    match task {
        Task::Congestion => {
            let (mut wsum, mut sum, mut hits) = (0.0, 0.0, 0usize);
            let mut tp = [0usize; 3];
            let mut predicted = [0usize; 3];
            let mut actual = [0usize; 3];
            for (i, (p, f)) in preds.iter().zip(frames).enumerate() {
                let labels = f
                    .classes
                    .as_ref()
                    .ok_or_else(|| Error::Invalid(format!("frame {i} has no congestion labels")))?;
                if p.shape() != [labels.len(), 3] {
                    return Err(Error::shape(
                        "evaluate",
                        format!("frame {i}: {:?} predictions", p.shape()),
                    ));
                }
                for (e, label) in labels.iter().enumerate() {
                    let Some(y) = label else { continue };
                    let row = p.row(e);
                    let y = y.index();
                    let lp = row[y].max(MIN_PROB).ln();
                    wsum -= weights.0[y] * lp;
                    sum -= lp;
                    let guess = argmax(row);
                    predicted[guess] += 1;
                    actual[y] += 1;
                    if guess == y {
                        hits += 1;
                        tp[y] += 1;
                    }
                    m.count += 1;
                }
            }
            if m.count == 0 {
                return Err(Error::Invalid("no labeled edges to evaluate".into()));
            }
            let n = m.count as f64;
            m.weighted_ce = wsum / n;
            m.ce = sum / n;
            m.accuracy = hits as f64 / n;
            for c in 0..3 {
                m.precision[c] = ratio(tp[c], predicted[c]);
                m.recall[c] = ratio(tp[c], actual[c]);
            }
        }
        Task::Speed => {
            let mut abs = 0.0;
            for (i, (p, f)) in preds.iter().zip(frames).enumerate() {
                let speeds = f
                    .speeds
                    .as_ref()
                    .ok_or_else(|| Error::Invalid(format!("frame {i} has no speed labels")))?;
                if p.shape() != [speeds.len(), 1] {
                    return Err(Error::shape(
                        "evaluate",
                        format!("frame {i}: {:?} predictions", p.shape()),
                    ));
                }
                abs += p
                    .data()
                    .iter()
                    .zip(speeds)
                    .map(|(a, b)| (a - b).abs())
                    .sum::<f64>();
                m.count += speeds.len();
            }
            if m.count == 0 {
                return Err(Error::Invalid("no speed labels to evaluate".into()));
            }
            m.mae = abs / m.count as f64;
        }
    }
    Ok(m)
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
            if v > best.1 {
                (i, v)
            } else {
                best
            }
        })
        .0
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphmodel::TimeSlot;
    use Congestion::*;

    fn frame(classes: Vec<Option<Congestion>>, speeds: Vec<f64>) -> CounterFrame {
        CounterFrame::new(Tensor::zeros(2, 4), TimeSlot::new(0, 0).unwrap())
            .unwrap()
            .with_classes(classes)
            .with_speeds(speeds)
    }

    #[test]
    fn uniform_probabilities_give_ln3() {
        let f = frame(vec![Some(Green)], vec![]);
        let p = Tensor::filled(1, 3, 1.0 / 3.0);
        let m = evaluate(&[p], &[&f], Task::Congestion, &ClassWeights::UNIFORM).unwrap();
        assert!((m.weighted_ce - 3f64.ln()).abs() < 1e-12);
        assert_eq!(m.count, 1);
    }

    #[test]
    fn perfect_predictions() {
        let f = frame(vec![Some(Red), None, Some(Yellow)], vec![30.0, 50.0]);
        let p = Tensor::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![0.2, 0.2, 0.6],
            vec![0.0, 1.0, 0.0],
        ])
        .unwrap();
        let m = evaluate(
            &[p],
            &[&f],
            Task::Congestion,
            &ClassWeights([2.0, 1.0, 1.0]),
        )
        .unwrap();
        assert_eq!(m.weighted_ce, 0.0);
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.count, 2);
        assert_eq!(m.precision, [1.0, 1.0, 0.0]);
        assert_eq!(m.recall, [1.0, 1.0, 0.0]);
        let s = Tensor::new(2, 1, vec![30.0, 50.0]).unwrap();
        let m = evaluate(&[s], &[&f], Task::Speed, &ClassWeights::UNIFORM).unwrap();
        assert_eq!(m.mae, 0.0);
        assert_eq!(m.score(), 0.0);
    }

    #[test]
    fn weighted_and_unweighted_differ_by_weights() {
        let f = frame(vec![Some(Red), Some(Green)], vec![]);
        let p = Tensor::from_rows(&[vec![0.5, 0.25, 0.25], vec![0.1, 0.1, 0.8]]).unwrap();
        let m = evaluate(
            &[p],
            &[&f],
            Task::Congestion,
            &ClassWeights([3.0, 1.0, 0.5]),
        )
        .unwrap();
        let want_w = -(3.0 * 0.5f64.ln() + 0.5 * 0.8f64.ln()) / 2.0;
        let want = -(0.5f64.ln() + 0.8f64.ln()) / 2.0;
        assert!((m.weighted_ce - want_w).abs() < 1e-12);
        assert!((m.ce - want).abs() < 1e-12);
        assert!(m.report().contains("class r precision 1 recall 1"));
    }

    #[test]
    fn errors() {
        let f = frame(vec![None], vec![]);
        let p = Tensor::filled(1, 3, 1.0 / 3.0);
        assert!(evaluate(
            std::slice::from_ref(&p),
            &[&f],
            Task::Congestion,
            &ClassWeights::UNIFORM
        )
        .is_err());
        assert!(evaluate(&[], &[&f], Task::Congestion, &ClassWeights::UNIFORM).is_err());
        assert!(evaluate(&[p], &[&f], Task::Speed, &ClassWeights::UNIFORM).is_err());
    }
}
