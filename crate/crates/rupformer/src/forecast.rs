//! Forecast CSV output in native KPI units.

use std::fmt::Write as _;
use std::path::Path;

use rupformer_core::kpi::{Normalizer, FEATURE_NAMES, N_DET};
use rupformer_core::rollout::QuantileForecast;

use crate::error::Result;
use crate::fsutil;

/// One row per step: the residual quantiles, then the deterministic KPIs
/// clipped to the training range and mapped back to native units.
pub fn render_forecast_csv(forecasts: &[QuantileForecast], normalizer: &Normalizer) -> String {
    let mut out = String::from("timestamp,carrier_id,q10,q50,q90");
    for name in &FEATURE_NAMES[..N_DET] {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for f in forecasts {
        let _ = write!(out, "{},{},{},{},{}", f.timestamp, f.carrier_id, f.q10, f.q50, f.q90);
        let native = normalizer.invert(&f.feedback());
        for v in &native[..N_DET] {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

pub fn write_forecast_csv(forecasts: &[QuantileForecast], normalizer: &Normalizer, path: &Path) -> Result<()> {
    fsutil::write_atomic(path, render_forecast_csv(forecasts, normalizer).as_bytes())
}
