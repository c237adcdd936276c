//! KPI CSV ingestion and export.

use std::fmt::Write as _;
use std::path::Path;

use chrono::DateTime;
use rupformer_core::kpi::{assemble_series, KpiRecord, KpiSeries};
use rupformer_core::time::Timestamp;

use crate::error::{Error, Result};
use crate::fsutil;

pub const HEADER: [&str; 11] = [
    "timestamp",
    "carrier_id",
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

/// Parses an RFC 3339 instant such as `2024-03-04T10:45:00Z`.
pub fn parse_timestamp(s: &str) -> Result<Timestamp, String> {
    DateTime::parse_from_rfc3339(s.trim())
        .map(|t| Timestamp(t.timestamp()))
        .map_err(|e| format!("malformed timestamp {s:?}: {e}"))
}

fn parse_row(row: &csv::StringRecord) -> Result<KpiRecord, String> {
    if row.len() != HEADER.len() {
        return Err(format!("expected {} fields, found {}", HEADER.len(), row.len()));
    }
    let field = |i: usize| {
        let v = row[i].trim();
        if v.is_empty() {
            Err(format!("missing {}", HEADER[i]))
        } else {
            Ok(v)
        }
    };
    let num = |i: usize| -> Result<f64, String> {
        let v = field(i)?;
        v.parse::<f64>().map_err(|_| format!("{} is not a number: {v:?}", HEADER[i]))
    };
    let carrier = field(1)?;
    Ok(KpiRecord {
        timestamp: parse_timestamp(field(0)?)?,
        carrier_id: carrier.parse().map_err(|_| format!("carrier_id is not an integer: {carrier:?}"))?,
        prb_mean: num(2)?,
        prb_total: num(3)?,
        active_tti: num(4)?,
        prb_pdsch: num(5)?,
        prb_pucch: num(6)?,
        ue_max: num(7)?,
        ue_avg: num(8)?,
        dl_tput: num(9)?,
        residual_prb: num(10)?,
    })
}

/// Reads and validates rows without grouping them.
pub fn read_records(data: &[u8], path: &Path) -> Result<Vec<KpiRecord>> {
    let csv_err = |line: u64, message: String| Error::Csv { path: path.into(), line, message };
    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(data);
    let header = reader.headers().map_err(|e| csv_err(1, e.to_string()))?;
    if header.iter().map(str::trim).ne(HEADER) {
        return Err(csv_err(1, format!("header must be {}", HEADER.join(","))));
    }
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| csv_err(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = row.position().map_or(0, |p| p.line());
        let rec = parse_row(&row).map_err(|m| csv_err(line, m))?;
        rec.validate().map_err(|e| csv_err(line, e.to_string()))?;
        out.push(rec);
    }
    Ok(out)
}

/// Loads a KPI file as per-carrier series on a gap-free 15-minute grid.
pub fn load_csv(path: &Path) -> Result<Vec<KpiSeries>> {
    let bytes = fsutil::read(path)?;
    let records = read_records(&bytes, path)?;
    Ok(assemble_series(records)?)
}

/// Renders series in the ingestion schema, carriers in order, one row per step.
pub fn render_csv(series: &[KpiSeries]) -> String {
    let mut out = HEADER.join(",");
    out.push('\n');
    for r in series.iter().flat_map(|s| &s.records) {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.timestamp,
            r.carrier_id,
            r.prb_mean,
            r.prb_total,
            r.active_tti,
            r.prb_pdsch,
            r.prb_pucch,
            r.ue_max,
            r.ue_avg,
            r.dl_tput,
            r.residual_prb
        );
    }
    out
}

pub fn write_csv(series: &[KpiSeries], path: &Path) -> Result<()> {
    fsutil::write_atomic(path, render_csv(series).as_bytes())
}
