//! Counter normalization: z-score with clipping and missing fill, min-max
//! scaling around the reconstruction model, and time-slot indexing.

use crate::error::{Error, Result};
use crate::graphmodel::{CounterFrame, TimeSlot, SLOTS_PER_DAY};
use crate::numerics::Tensor;

/// Upper clip applied to z-scored counters.
pub const DEFAULT_CLIP_MAX: f64 = 23.91;

/// Per-city counter statistics over observed training cells.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub clip_max: f64,
}

impl NormStats {
    pub fn new(mean: f64, std: f64, min: f64, max: f64, clip_max: f64) -> Result<Self> {
        let all_finite = [mean, std, min, max, clip_max]
            .iter()
            .all(|v| v.is_finite());
        if !all_finite || std <= 0.0 || min > max {
            return Err(Error::Invalid(format!(
                "invalid stats: mean {mean}, std {std}, min {min}, max {max}, clip {clip_max}"
            )));
        }
        Ok(Self {
            mean,
            std,
            min,
            max,
            clip_max,
        })
    }

    pub fn zscore(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    /// Value that missing cells take after normalization.
    pub fn fill_value(&self) -> f64 {
        self.zscore(self.min).min(self.clip_max)
    }

    /// Extremes of normalized data, used for global min-max scaling.
    pub fn normalized_range(&self) -> (f64, f64) {
        (self.fill_value(), self.zscore(self.max).min(self.clip_max))
    }
}

/// Mean, population std, min and max over observed cells of `frames`.
pub fn fit_stats<'a, I>(frames: I) -> Result<NormStats>
where
    I: IntoIterator<Item = &'a CounterFrame>,
{
    fit_stats_values(
        frames
            .into_iter()
            .flat_map(|f| f.x().data().iter().copied()),
    )
}

/// As [`fit_stats`] over raw values; NaN entries are skipped.
pub fn fit_stats_values(values: impl IntoIterator<Item = f64>) -> Result<NormStats> {
    let (mut n, mut sum, mut min, mut max) = (0usize, 0.0, f64::INFINITY, f64::NEG_INFINITY);
    let mut observed = Vec::new();
    for v in values.into_iter().filter(|v| !v.is_nan()) {
        n += 1;
        sum += v;
        min = min.min(v);
        max = max.max(v);
        observed.push(v);
    }
    if n == 0 {
        return Err(Error::Invalid("no observed counter values".into()));
    }
    let mean = sum / n as f64;
    let var = observed.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    let std = var.sqrt();
    if std <= 0.0 {
        return Err(Error::Invalid("counter values have zero variance".into()));
    }
    NormStats::new(mean, std, min, max, DEFAULT_CLIP_MAX)
}

/// z-score and clip observed cells, fill missing cells with the normalized
/// dataset minimum. The result has no NaN.
pub fn normalize(x: &Tensor, mask: &Tensor, stats: &NormStats) -> Result<Tensor> {
    let fill = stats.fill_value();
    x.zip_map(mask, "normalize", |v, m| {
        if m == 0.0 || v.is_nan() {
            fill
        } else {
            stats.zscore(v).min(stats.clip_max)
        }
    })
}

/// Slot index for a weekday (0 = Monday) and minute of day.
pub fn time_index(weekday: usize, minute_of_day: usize) -> Result<TimeSlot> {
    if minute_of_day >= 24 * 60 {
        return Err(Error::Invalid(format!(
            "minute of day {minute_of_day} out of range"
        )));
    }
    let slot = minute_of_day / 15;
    debug_assert!(slot < SLOTS_PER_DAY);
    TimeSlot::new(weekday, slot)
}

pub fn minmax_to_unit(x: &Tensor, lo: f64, hi: f64) -> Result<Tensor> {
    check_range(lo, hi)?;
    let span = hi - lo;
    Ok(x.map(|v| (v - lo) / span))
}

pub fn restore(y: &Tensor, lo: f64, hi: f64) -> Result<Tensor> {
    check_range(lo, hi)?;
    let span = hi - lo;
    Ok(y.map(|v| v * span + lo))
}

fn check_range(lo: f64, hi: f64) -> Result<()> {
    if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Invalid(format!(
            "min-max range needs hi > lo, got [{lo}, {hi}]"
        )));
    }
    Ok(())
}

/// Range used to scale a normalized frame into `[0, 1]`.
///
/// Global: the normalized dataset extremes. Otherwise the extremes of this
/// input; a constant input gets a unit-width range starting at its value.
pub fn unit_range(x_hat: &Tensor, stats: &NormStats, global: bool) -> (f64, f64) {
    if global {
        let (lo, hi) = stats.normalized_range();
        if hi > lo {
            return (lo, hi);
        }
        return (lo, lo + 1.0);
    }
    let lo = x_hat.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = x_hat
        .data()
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        (lo, hi)
    } else {
        (lo, lo + 1.0)
    }
}
