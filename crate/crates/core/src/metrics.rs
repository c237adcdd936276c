//! Point and interval accuracy of residual-PRB forecasts.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::Serialize;
use thiserror::Error;

use crate::kpi::{KpiSeries, Normalizer};
use crate::model::RupFormer;
use crate::rollout::{rollout, QuantileForecast, RolloutError, RolloutState};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("series lengths differ: {0} vs {1}")]
    Length(usize, usize),
    #[error("at least {0} points are required")]
    TooShort(usize),
    #[error("prediction interval crosses at step {0}")]
    CrossingInterval(usize),
    #[error("carrier {carrier}: anchor {anchor} needs {need_history} history and {horizon} future steps in a series of {len}")]
    Anchor { carrier: usize, anchor: usize, need_history: usize, horizon: usize, len: usize },
    #[error(transparent)]
    Rollout(#[from] RolloutError),
}

fn same_len(a: usize, b: usize) -> Result<(), MetricsError> {
    if a != b {
        Err(MetricsError::Length(a, b))
    } else if a == 0 {
        Err(MetricsError::TooShort(1))
    } else {
        Ok(())
    }
}

/// Mean absolute error of the median forecast.
pub fn mae(truth: &[f64], median: &[f64]) -> Result<f64, MetricsError> {
    same_len(truth.len(), median.len())?;
    Ok(truth.iter().zip(median).map(|(r, p)| (r - p).abs()).sum::<f64>() / truth.len() as f64)
}

/// Population standard deviation of the absolute median error.
pub fn abs_err_std(truth: &[f64], median: &[f64]) -> Result<f64, MetricsError> {
    same_len(truth.len(), median.len())?;
    if truth.len() < 2 {
        return Err(MetricsError::TooShort(2));
    }
    Ok(population_std(truth.iter().zip(median).map(|(r, p)| (r - p).abs())))
}

fn population_std(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    libm::sqrt(values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n)
}

/// Fraction of steps whose truth lies inside `[lower, upper]`, bounds included.
pub fn hit_probability(truth: &[f64], lower: &[f64], upper: &[f64]) -> Result<f64, MetricsError> {
    same_len(truth.len(), lower.len())?;
    same_len(truth.len(), upper.len())?;
    if let Some(k) = lower.iter().zip(upper).position(|(l, u)| l > u) {
        return Err(MetricsError::CrossingInterval(k));
    }
    let hits = truth
        .iter()
        .zip(lower.iter().zip(upper))
        .filter(|(r, (l, u))| *l <= *r && *r <= *u)
        .count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Truth and forecast of one rollout, in ratio units.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub carrier_id: usize,
    pub anchor: usize,
    pub truth: Vec<f64>,
    pub forecasts: Vec<QuantileForecast>,
}

impl Trajectory {
    fn column(&self, f: impl Fn(&QuantileForecast) -> f32) -> Vec<f64> {
        self.forecasts.iter().map(|q| f64::from(f(q))).collect()
    }

    pub fn q10(&self) -> Vec<f64> {
        self.column(|q| q.q10)
    }

    pub fn q50(&self) -> Vec<f64> {
        self.column(|q| q.q50)
    }

    pub fn q90(&self) -> Vec<f64> {
        self.column(|q| q.q90)
    }

    pub fn mae(&self) -> Result<f64, MetricsError> {
        mae(&self.truth, &self.q50())
    }

    pub fn hit_probability(&self) -> Result<f64, MetricsError> {
        hit_probability(&self.truth, &self.q10(), &self.q90())
    }

    pub fn abs_err_std(&self) -> Result<f64, MetricsError> {
        if self.truth.len() == 1 {
            return Ok(0.0);
        }
        abs_err_std(&self.truth, &self.q50())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CarrierReport {
    pub carrier_id: usize,
    pub mae: f64,
    pub abs_err_std: f64,
    pub hit_prob: f64,
    pub horizon: usize,
    pub anchors: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateReport {
    pub mean_mae: f64,
    pub mae_std: f64,
    pub mean_hit_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct ReportMeta {
    pub model_hash: String,
    pub data_start: String,
    pub data_end: String,
    pub horizon: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub per_carrier: Vec<CarrierReport>,
    pub aggregate: AggregateReport,
    pub metadata: ReportMeta,
    /// Trajectory from each carrier's first anchor.
    #[serde(skip)]
    pub trajectories: Vec<Trajectory>,
}

/// `count` anchors spread evenly over the indices that leave `history` steps
/// before and `horizon` steps after each anchor. A single anchor sits at the
/// earliest admissible position.
pub fn spaced_anchors(len: usize, history: usize, horizon: usize, count: usize) -> Vec<usize> {
    if count == 0 || len < history + horizon {
        return Vec::new();
    }
    let (lo, hi) = (history, len - horizon);
    if count == 1 || lo == hi {
        return alloc::vec![lo];
    }
    let mut out: Vec<usize> = (0..count)
        .map(|i| lo + ((hi - lo) as f64 * i as f64 / (count - 1) as f64 + 0.5) as usize)
        .collect();
    out.dedup();
    out
}

/// Runs a rollout from `anchor` (index of the first forecast step).
pub fn trajectory(
    model: &RupFormer,
    normalizer: &Normalizer,
    series: &KpiSeries,
    anchor: usize,
    horizon: usize,
) -> Result<Trajectory, MetricsError> {
    let n = model.hyperparams().input_len;
    if anchor < n || anchor + horizon > series.len() || horizon == 0 {
        return Err(MetricsError::Anchor {
            carrier: series.carrier_id,
            anchor,
            need_history: n,
            horizon,
            len: series.len(),
        });
    }
    let state = RolloutState::from_records(&series.records[anchor - n..anchor], normalizer)?;
    let forecasts = rollout(model, state, horizon)?;
    let truth = series.records[anchor..anchor + horizon].iter().map(|r| r.residual_prb).collect();
    Ok(Trajectory { carrier_id: series.carrier_id, anchor, truth, forecasts })
}

/// Per-carrier metrics averaged uniformly over anchors, then aggregated over carriers.
pub fn evaluate(
    model: &RupFormer,
    normalizer: &Normalizer,
    test: &[KpiSeries],
    horizon: usize,
    anchors: &[usize],
) -> Result<EvalReport, MetricsError> {
    if test.is_empty() || anchors.is_empty() {
        return Err(MetricsError::TooShort(1));
    }
    let mut per_carrier = Vec::with_capacity(test.len());
    let mut trajectories = Vec::with_capacity(test.len());
    for series in test {
        let (mut m, mut s, mut h) = (0.0, 0.0, 0.0);
        for (i, &anchor) in anchors.iter().enumerate() {
            let t = trajectory(model, normalizer, series, anchor, horizon)?;
            m += t.mae()?;
            s += t.abs_err_std()?;
            h += t.hit_probability()?;
            if i == 0 {
                trajectories.push(t);
            }
        }
        let k = anchors.len() as f64;
        per_carrier.push(CarrierReport {
            carrier_id: series.carrier_id,
            mae: m / k,
            abs_err_std: s / k,
            hit_prob: h / k,
            horizon,
            anchors: anchors.len(),
        });
    }
    let c = per_carrier.len() as f64;
    let aggregate = AggregateReport {
        mean_mae: per_carrier.iter().map(|r| r.mae).sum::<f64>() / c,
        mae_std: population_std(per_carrier.iter().map(|r| r.mae)),
        mean_hit_prob: per_carrier.iter().map(|r| r.hit_prob).sum::<f64>() / c,
    };
    let first = test.iter().filter_map(|s| s.records.first()).map(|r| r.timestamp).min();
    let last = test.iter().filter_map(|s| s.records.last()).map(|r| r.timestamp).max();
    let metadata = ReportMeta {
        model_hash: String::new(),
        data_start: first.map(|t| t.to_string()).unwrap_or_default(),
        data_end: last.map(|t| t.to_string()).unwrap_or_default(),
        horizon,
    };
    Ok(EvalReport { per_carrier, aggregate, metadata, trajectories })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn mae_examples() {
        assert!((mae(&[0.5, 0.7], &[0.4, 0.9]).unwrap() - 0.15).abs() < 1e-12);
        assert_eq!(mae(&[0.3, 0.2], &[0.3, 0.2]).unwrap(), 0.0);
        assert_eq!(mae(&[0.3], &[0.3, 0.2]), Err(MetricsError::Length(1, 2)));
    }

    #[test]
    fn hit_probability_examples() {
        let truth = [0.1, 0.5, 0.9, 0.95];
        let lo = [0.0, 0.4, 0.8, 0.0];
        let hi = [0.2, 0.6, 1.0, 0.5];
        assert_eq!(hit_probability(&truth, &lo, &hi).unwrap(), 0.75);
        assert_eq!(hit_probability(&truth, &[0.0; 4], &[1.0; 4]).unwrap(), 1.0);
        assert_eq!(hit_probability(&[0.3], &[0.3], &[0.6]).unwrap(), 1.0);
        assert_eq!(
            hit_probability(&[0.3], &[0.6], &[0.3]),
            Err(MetricsError::CrossingInterval(0))
        );
    }

    #[test]
    fn abs_err_std_examples() {
        assert!(abs_err_std(&[0.1, 0.2, 0.3], &[0.2, 0.3, 0.4]).unwrap() < 1e-12);
        assert!((abs_err_std(&[0.0, 0.2], &[0.0, 0.0]).unwrap() - 0.1).abs() < 1e-12);
        assert_eq!(abs_err_std(&[0.1], &[0.1]), Err(MetricsError::TooShort(2)));
    }

    #[test]
    fn anchors_are_spread_over_the_admissible_range() {
        assert_eq!(spaced_anchors(200, 4, 96, 1), vec![4]);
        assert_eq!(spaced_anchors(200, 4, 96, 3), vec![4, 54, 104]);
        assert!(spaced_anchors(50, 4, 96, 3).is_empty());
    }
}
