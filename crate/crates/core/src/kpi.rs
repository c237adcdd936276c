//! KPI records, per-carrier series, normalization, chronological splitting and
//! sliding-window sample construction.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::time::{calendar_indices, CalendarIndex, Timestamp, Unaligned};

/// Number of features in one KPI vector.
pub const N_FEATURES: usize = 9;
/// Number of deterministically predicted features (everything except the residual ratio).
pub const N_DET: usize = N_FEATURES - 1;
/// Position of the residual PRB ratio inside a feature vector.
pub const RESIDUAL: usize = 8;
/// Carriers per eNB: three sectors with seven carriers each.
pub const MAX_CARRIERS: usize = 21;

/// Column names in feature order.
pub const FEATURE_NAMES: [&str; N_FEATURES] = [
    "prb_mean",
    "prb_total",
    "active_tti",
    "prb_pdsch",
    "prb_pucch",
    "ue_max",
    "ue_avg",
    "dl_tput",
    "residual_prb",
];

pub type Features = [f32; N_FEATURES];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DataError {
    #[error("PRB counts out of domain: used {used} of total {total}")]
    PrbDomain { total: f64, used: f64 },
    #[error("carrier id {0} outside 0..=20")]
    CarrierRange(usize),
    #[error("residual ratio {value} at {at} outside [0, 1]")]
    ResidualRange { value: f64, at: Timestamp },
    #[error("negative or non-finite {field} at {at}")]
    InvalidValue { field: &'static str, at: Timestamp },
    #[error("ue_avg exceeds ue_max at {0}")]
    UeOrder(Timestamp),
    #[error(transparent)]
    Unaligned(#[from] Unaligned),
    #[error("duplicate timestamp {at} for carrier {carrier}")]
    Duplicate { carrier: usize, at: Timestamp },
    #[error("carrier {carrier}: gap in the 15-minute grid between {after} and {next}")]
    Gap { carrier: usize, after: Timestamp, next: Timestamp },
    #[error("carrier {carrier}: {have} records, need at least {need}")]
    InsufficientLength { carrier: usize, have: usize, need: usize },
    #[error("invalid split: {0}")]
    Split(&'static str),
    #[error("no records")]
    Empty,
}

/// Residual PRB ratio `(total - used) / total`.
pub fn residual_ratio(n_total: f64, n_used: f64) -> Result<f64, DataError> {
    // negated so NaN is rejected too
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    if !(n_total > 0.0) || !(n_used >= 0.0) || n_used > n_total {
        return Err(DataError::PrbDomain { total: n_total, used: n_used });
    }
    Ok((n_total - n_used) / n_total)
}

/// One 15-minute KPI report of one carrier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KpiRecord {
    pub timestamp: Timestamp,
    pub carrier_id: usize,
    pub prb_mean: f64,
    pub prb_total: f64,
    pub active_tti: f64,
    pub prb_pdsch: f64,
    pub prb_pucch: f64,
    pub ue_max: f64,
    pub ue_avg: f64,
    pub dl_tput: f64,
    pub residual_prb: f64,
}

impl KpiRecord {
    /// Raw feature vector in [`FEATURE_NAMES`] order.
    pub fn features(&self) -> [f64; N_FEATURES] {
        [
            self.prb_mean,
            self.prb_total,
            self.active_tti,
            self.prb_pdsch,
            self.prb_pucch,
            self.ue_max,
            self.ue_avg,
            self.dl_tput,
            self.residual_prb,
        ]
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if !self.timestamp.is_aligned() {
            return Err(Unaligned(self.timestamp).into());
        }
        if self.carrier_id >= MAX_CARRIERS {
            return Err(DataError::CarrierRange(self.carrier_id));
        }
        let f = self.features();
        for (name, v) in FEATURE_NAMES.iter().zip(f).take(N_DET) {
            if !(v.is_finite() && v >= 0.0) {
                return Err(DataError::InvalidValue { field: name, at: self.timestamp });
            }
        }
        if !(0.0..=1.0).contains(&self.residual_prb) {
            return Err(DataError::ResidualRange { value: self.residual_prb, at: self.timestamp });
        }
        if self.ue_avg > self.ue_max {
            return Err(DataError::UeOrder(self.timestamp));
        }
        Ok(())
    }

    pub fn calendar(&self) -> Result<CalendarIndex, Unaligned> {
        calendar_indices(self.timestamp, self.carrier_id)
    }
}

/// Chronological, gap-free KPI records of a single carrier.
#[derive(Debug, Clone, PartialEq)]
pub struct KpiSeries {
    pub carrier_id: usize,
    pub records: Vec<KpiRecord>,
}

impl KpiSeries {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Index of the record at `ts`, if present.
    pub fn position(&self, ts: Timestamp) -> Option<usize> {
        let first = self.records.first()?.timestamp;
        let off = ts.0 - first.0;
        if off < 0 || off % crate::time::STEP_SECS != 0 {
            return None;
        }
        let i = (off / crate::time::STEP_SECS) as usize;
        (i < self.records.len()).then_some(i)
    }

    pub fn residuals(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.residual_prb).collect()
    }
}

/// Groups records by carrier (ascending), sorts each group by time and checks
/// every record plus the grid contiguity of every group.
pub fn assemble_series(mut records: Vec<KpiRecord>) -> Result<Vec<KpiSeries>, DataError> {
    if records.is_empty() {
        return Err(DataError::Empty);
    }
    for r in &records {
        r.validate()?;
    }
    records.sort_by_key(|r| (r.carrier_id, r.timestamp));
    let mut groups: BTreeMap<usize, Vec<KpiRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.carrier_id).or_default().push(r);
    }
    let mut out = Vec::with_capacity(groups.len());
    for (carrier, recs) in groups {
        for w in recs.windows(2) {
            let (a, b) = (w[0].timestamp, w[1].timestamp);
            if a == b {
                return Err(DataError::Duplicate { carrier, at: a });
            }
            if b != a.add_steps(1) {
                return Err(DataError::Gap { carrier, after: a, next: b });
            }
        }
        out.push(KpiSeries { carrier_id: carrier, records: recs });
    }
    Ok(out)
}

/// Per-feature min-max scaling fitted on the training split. The residual
/// ratio passes through unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub min: [f64; N_DET],
    pub max: [f64; N_DET],
}

impl Normalizer {
    /// Leaves every feature unchanged on `[0, 1]`.
    pub fn identity() -> Self {
        Self { min: [0.0; N_DET], max: [1.0; N_DET] }
    }

    pub fn fit(train: &[KpiSeries]) -> Result<Self, DataError> {
        let mut min = [f64::INFINITY; N_DET];
        let mut max = [f64::NEG_INFINITY; N_DET];
        let mut seen = false;
        for r in train.iter().flat_map(|s| &s.records) {
            seen = true;
            for (j, v) in r.features().into_iter().take(N_DET).enumerate() {
                min[j] = min[j].min(v);
                max[j] = max[j].max(v);
            }
        }
        if !seen {
            return Err(DataError::Empty);
        }
        for j in 0..N_DET {
            if max[j] <= min[j] {
                log::warn!(
                    "feature {} is constant ({}) on the training split; it will be mapped to 0",
                    FEATURE_NAMES[j],
                    min[j]
                );
            }
        }
        Ok(Self { min, max })
    }

    pub fn is_constant(&self, feature: usize) -> bool {
        self.max[feature] <= self.min[feature]
    }

    /// Scales one raw feature vector, clipping to `[0, 1]`.
    pub fn apply(&self, raw: &[f64; N_FEATURES]) -> Features {
        let mut out = [0.0f32; N_FEATURES];
        for j in 0..N_DET {
            out[j] = if self.is_constant(j) {
                0.0
            } else {
                ((raw[j] - self.min[j]) / (self.max[j] - self.min[j])).clamp(0.0, 1.0) as f32
            };
        }
        out[RESIDUAL] = raw[RESIDUAL].clamp(0.0, 1.0) as f32;
        out
    }

    pub fn invert(&self, scaled: &Features) -> [f64; N_FEATURES] {
        let mut out = [0.0f64; N_FEATURES];
        for j in 0..N_DET {
            out[j] = self.min[j] + f64::from(scaled[j]) * (self.max[j] - self.min[j]).max(0.0);
        }
        out[RESIDUAL] = f64::from(scaled[RESIDUAL]);
        out
    }
}

/// How to cut the common timeline into train / validation / test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SplitPlan {
    /// Fractions of the overall span for train and validation; the rest is test.
    Fractions { train: f64, val: f64 },
    /// Lengths in 15-minute steps measured from the earliest record.
    Steps { train: usize, val: usize, test: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<KpiSeries>,
    pub val: Vec<KpiSeries>,
    pub test: Vec<KpiSeries>,
    /// First instants of the validation and test parts.
    pub cuts: [Timestamp; 2],
}

/// Splits every carrier at the same two instants. Each part of each carrier
/// must hold at least `min_part` records.
pub fn chronological_split(
    series: &[KpiSeries],
    plan: SplitPlan,
    min_part: usize,
) -> Result<Split, DataError> {
    let origin = series
        .iter()
        .filter_map(|s| s.records.first())
        .map(|r| r.timestamp)
        .min()
        .ok_or(DataError::Empty)?;
    let end = series
        .iter()
        .filter_map(|s| s.records.last())
        .map(|r| r.timestamp.add_steps(1))
        .max()
        .ok_or(DataError::Empty)?;
    let total = ((end.0 - origin.0) / crate::time::STEP_SECS) as usize;
    let (n_train, n_val, n_test) = match plan {
        SplitPlan::Fractions { train, val } => {
            if !(train > 0.0 && val > 0.0 && train + val < 1.0) {
                return Err(DataError::Split("fractions must be positive and sum below 1"));
            }
            let a = libm::round(total as f64 * train) as usize;
            let b = libm::round(total as f64 * val) as usize;
            (a, b, total.saturating_sub(a + b))
        }
        SplitPlan::Steps { train, val, test } => (train, val, test),
    };
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(DataError::Split("every part needs at least one step"));
    }
    let cut_val = origin.add_steps(n_train as i64);
    let cut_test = cut_val.add_steps(n_val as i64);
    let stop = cut_test.add_steps(n_test as i64);

    let part = |s: &KpiSeries, from: Timestamp, to: Timestamp| -> Result<KpiSeries, DataError> {
        let records: Vec<KpiRecord> = s
            .records
            .iter()
            .filter(|r| r.timestamp >= from && r.timestamp < to)
            .copied()
            .collect();
        if records.len() < min_part.max(1) {
            return Err(DataError::InsufficientLength {
                carrier: s.carrier_id,
                have: records.len(),
                need: min_part.max(1),
            });
        }
        Ok(KpiSeries { carrier_id: s.carrier_id, records })
    };
    let mut split = Split { train: Vec::new(), val: Vec::new(), test: Vec::new(), cuts: [cut_val, cut_test] };
    for s in series {
        split.train.push(part(s, origin, cut_val)?);
        split.val.push(part(s, cut_val, cut_test)?);
        split.test.push(part(s, cut_test, stop)?);
    }
    Ok(split)
}

/// One encoder window and its decoder targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub carrier_id: usize,
    /// Timestamp of the first encoder step.
    pub start: Timestamp,
    pub encoder_inputs: Vec<Features>,
    pub encoder_meta: Vec<CalendarIndex>,
    pub decoder_targets: Vec<Features>,
    pub decoder_meta: Vec<CalendarIndex>,
}

impl TrainingSample {
    /// Timestamps of the decoder targets.
    pub fn target_times(&self) -> impl Iterator<Item = Timestamp> + '_ {
        let n = self.encoder_inputs.len() as i64;
        (0..self.decoder_targets.len() as i64).map(move |k| self.start.add_steps(n + k))
    }
}

/// Normalized features and calendar indices of a whole series.
pub fn encode_series(
    series: &KpiSeries,
    normalizer: &Normalizer,
) -> Result<(Vec<Features>, Vec<CalendarIndex>), DataError> {
    let feats = series.records.iter().map(|r| normalizer.apply(&r.features())).collect();
    let meta = series
        .records
        .iter()
        .map(KpiRecord::calendar)
        .collect::<Result<_, _>>()?;
    Ok((feats, meta))
}

/// Builds one sample per anchor (`stride` apart) in every carrier. Samples are
/// interleaved across carriers: all carriers' first windows, then their second
/// windows, and so on.
pub fn make_samples(
    series: &[KpiSeries],
    normalizer: &Normalizer,
    n: usize,
    m: usize,
    stride: usize,
) -> Result<Vec<TrainingSample>, DataError> {
    assert!(n > 0 && m > 0 && stride > 0, "window sizes and stride must be positive");
    let mut per_carrier = Vec::with_capacity(series.len());
    for s in series {
        if s.len() < n + m {
            return Err(DataError::InsufficientLength { carrier: s.carrier_id, have: s.len(), need: n + m });
        }
        let (feats, meta) = encode_series(s, normalizer)?;
        let samples: Vec<TrainingSample> = (0..=s.len() - n - m)
            .step_by(stride)
            .map(|a| TrainingSample {
                carrier_id: s.carrier_id,
                start: s.records[a].timestamp,
                encoder_inputs: feats[a..a + n].to_vec(),
                encoder_meta: meta[a..a + n].to_vec(),
                decoder_targets: feats[a + n..a + n + m].to_vec(),
                decoder_meta: meta[a + n..a + n + m].to_vec(),
            })
            .collect();
        per_carrier.push(samples);
    }
    let longest = per_carrier.iter().map(Vec::len).max().unwrap_or(0);
    let mut iters: Vec<_> = per_carrier.into_iter().map(Vec::into_iter).collect();
    let mut out = Vec::new();
    for _ in 0..longest {
        for it in iters.iter_mut() {
            if let Some(s) = it.next() {
                out.push(s);
            }
        }
    }
    Ok(out)
}
