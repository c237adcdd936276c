//! Recursive block-wise inference over a fixed-length sliding window.

use alloc::vec::Vec;

use thiserror::Error;

use crate::kpi::{Features, KpiRecord, Normalizer, N_DET, RESIDUAL};
use crate::model::{ModelError, RupFormer};
use crate::time::{calendar_indices, CalendarIndex, Timestamp, Unaligned};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RolloutError {
    #[error("horizon must be at least one step")]
    Horizon,
    #[error("window holds {actual} steps, the model needs {expected}")]
    WindowLength { expected: usize, actual: usize },
    #[error("window records are not consecutive grid steps of one carrier")]
    Discontiguous,
    #[error(transparent)]
    Calendar(#[from] Unaligned),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Forecast for one future step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantileForecast {
    pub timestamp: Timestamp,
    pub carrier_id: usize,
    pub q10: f32,
    pub q50: f32,
    pub q90: f32,
    /// Deterministic KPI predictions in normalized units (unclipped).
    pub det: [f32; N_DET],
}

impl QuantileForecast {
    /// The vector fed back into the window: clipped deterministic KPIs and the median.
    pub fn feedback(&self) -> Features {
        let mut f = [0.0; crate::kpi::N_FEATURES];
        for (dst, src) in f.iter_mut().zip(&self.det) {
            *dst = src.clamp(0.0, 1.0);
        }
        f[RESIDUAL] = self.q50;
        f
    }
}

/// Sliding window of the most recent `N` (observed or predicted) vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutState {
    window: Vec<Features>,
    window_meta: Vec<CalendarIndex>,
    /// Instant of the first step not yet in the window.
    next_timestamp: Timestamp,
    carrier_id: usize,
    blocks_emitted: usize,
}

impl RolloutState {
    /// Starts from normalized features whose last step is at `window_end`.
    pub fn new(window: Vec<Features>, window_end: Timestamp, carrier_id: usize) -> Result<Self, RolloutError> {
        let n = window.len() as i64;
        let window_meta = (0..n)
            .map(|i| calendar_indices(window_end.add_steps(i - n + 1), carrier_id))
            .collect::<Result<_, _>>()?;
        Ok(Self { window, window_meta, next_timestamp: window_end.add_steps(1), carrier_id, blocks_emitted: 0 })
    }

    /// Normalizes consecutive observed records of one carrier.
    pub fn from_records(records: &[KpiRecord], normalizer: &Normalizer) -> Result<Self, RolloutError> {
        let last = records.last().ok_or(RolloutError::WindowLength { expected: 1, actual: 0 })?;
        let contiguous = records
            .windows(2)
            .all(|w| w[1].timestamp == w[0].timestamp.add_steps(1) && w[1].carrier_id == w[0].carrier_id);
        if !contiguous {
            return Err(RolloutError::Discontiguous);
        }
        let window = records.iter().map(|r| normalizer.apply(&r.features())).collect();
        Self::new(window, last.timestamp, last.carrier_id)
    }

    pub fn window(&self) -> &[Features] {
        &self.window
    }

    pub fn window_meta(&self) -> &[CalendarIndex] {
        &self.window_meta
    }

    pub fn next_timestamp(&self) -> Timestamp {
        self.next_timestamp
    }

    pub fn carrier_id(&self) -> usize {
        self.carrier_id
    }

    pub fn blocks_emitted(&self) -> usize {
        self.blocks_emitted
    }

    /// Predicts the next `M` steps and slides them into the window.
    pub fn advance(&mut self, model: &RupFormer) -> Result<Vec<QuantileForecast>, RolloutError> {
        let hp = model.hyperparams();
        if self.window.len() != hp.input_len {
            return Err(RolloutError::WindowLength { expected: hp.input_len, actual: self.window.len() });
        }
        let m = hp.output_len;
        let future_meta: Vec<CalendarIndex> = (0..m as i64)
            .map(|k| calendar_indices(self.next_timestamp.add_steps(k), self.carrier_id))
            .collect::<Result<_, _>>()?;
        let out = model.forward_block(&self.window, &self.window_meta, &future_meta)?;
        let forecasts: Vec<QuantileForecast> = (0..m)
            .map(|k| {
                let q = out.quantile_row(k);
                let mut det = [0.0; N_DET];
                det.copy_from_slice(out.det_row(k));
                QuantileForecast {
                    timestamp: self.next_timestamp.add_steps(k as i64),
                    carrier_id: self.carrier_id,
                    q10: q[0],
                    q50: q[1],
                    q90: q[2],
                    det,
                }
            })
            .collect();

        self.window.extend(forecasts.iter().map(QuantileForecast::feedback));
        self.window_meta.extend(future_meta);
        let excess = self.window.len() - hp.input_len;
        self.window.drain(..excess);
        self.window_meta.drain(..excess);
        self.next_timestamp = self.next_timestamp.add_steps(m as i64);
        self.blocks_emitted += 1;
        Ok(forecasts)
    }
}

/// Forecasts `horizon` steps by repeated blocks, truncating the last block.
pub fn rollout(model: &RupFormer, state: RolloutState, horizon: usize) -> Result<Vec<QuantileForecast>, RolloutError> {
    rollout_traced(model, state, horizon, &mut |_, _| {})
}

/// Like [`rollout`], calling `observe` with the state after each block.
pub fn rollout_traced(
    model: &RupFormer,
    mut state: RolloutState,
    horizon: usize,
    observe: &mut dyn FnMut(&RolloutState, &[QuantileForecast]),
) -> Result<Vec<QuantileForecast>, RolloutError> {
    if horizon == 0 {
        return Err(RolloutError::Horizon);
    }
    let mut out = Vec::with_capacity(horizon);
    while out.len() < horizon {
        let block = state.advance(model)?;
        observe(&state, &block);
        let take = (horizon - out.len()).min(block.len());
        out.extend_from_slice(&block[..take]);
    }
    Ok(out)
}
