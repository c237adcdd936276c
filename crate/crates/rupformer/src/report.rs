//! Evaluation report JSON and SVG forecast plots.

use std::fmt::Write as _;
use std::path::Path;

use rupformer_core::metrics::{EvalReport, Trajectory};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fsutil;

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn render_report(report: &EvalReport) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serializes");
    s.push('\n');
    s
}

pub fn write_report(report: &EvalReport, path: &Path) -> Result<()> {
    fsutil::write_atomic(path, render_report(report).as_bytes())
}

const WIDTH: f64 = 960.0;
const HEIGHT: f64 = 360.0;
const LEFT: f64 = 56.0;
const RIGHT: f64 = 16.0;
const TOP: f64 = 24.0;
const BOTTOM: f64 = 40.0;

fn x_at(k: usize, steps: usize) -> f64 {
    let span = (steps.max(2) - 1) as f64;
    LEFT + (WIDTH - LEFT - RIGHT) * k as f64 / span
}

/// Ratios are drawn on a fixed `[0, 1]` axis.
fn y_at(v: f64) -> f64 {
    TOP + (HEIGHT - TOP - BOTTOM) * (1.0 - v.clamp(0.0, 1.0))
}

fn points(values: impl Iterator<Item = (usize, f64)>, steps: usize) -> String {
    let mut s = String::new();
    for (k, v) in values {
        if !s.is_empty() {
            s.push(' ');
        }
        let _ = write!(s, "{:.2},{:.2}", x_at(k, steps), y_at(v));
    }
    s
}

/// Standalone SVG with the q10-q90 band, the median and the truth.
pub fn render_plot_svg(traj: &Trajectory) -> Result<String> {
    let k = traj.truth.len();
    if k == 0 || traj.forecasts.len() != k {
        return Err(Error::Usage(format!(
            "plot needs equal non-empty series, got {} truth and {} forecast steps",
            k,
            traj.forecasts.len()
        )));
    }
    let (q10, q50, q90) = (traj.q10(), traj.q50(), traj.q90());
    let band = points(q90.iter().copied().enumerate().chain(q10.iter().copied().enumerate().rev()), k);
    let median = points(q50.iter().copied().enumerate(), k);
    let truth = points(traj.truth.iter().copied().enumerate(), k);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(
        s,
        r#"<title>carrier {} from {}</title>"#,
        traj.carrier_id, traj.forecasts[0].timestamp
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let (x0, x1, y0, y1) = (LEFT, WIDTH - RIGHT, y_at(0.0), y_at(1.0));
    let _ = writeln!(s, r#"<g stroke="black" stroke-width="1">"#);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}"/>"#);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}"/>"#);
    let _ = writeln!(s, "</g>");
    let _ = writeln!(s, r#"<g font-family="sans-serif" font-size="11" fill="black">"#);
    for tick in 0..=4 {
        let v = tick as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{v:.2}</text>"#, LEFT - 6.0, y_at(v) + 4.0);
    }
    let ticks = 6.min(k);
    for i in 0..ticks {
        let step = if ticks > 1 { i * (k - 1) / (ticks - 1) } else { 0 };
        let label = traj.forecasts[step].timestamp.to_string();
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            x_at(step, k),
            y0 + 16.0,
            &label[5..16]
        );
    }
    let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">time (UTC)</text>"#, WIDTH / 2.0, HEIGHT - 4.0);
    let _ = writeln!(s, "</g>");
    let _ = writeln!(s, r##"<polygon class="band" points="{band}" fill="#9ecae1" fill-opacity="0.5" stroke="none"/>"##);
    let _ = writeln!(s, r##"<polyline class="median" points="{median}" fill="none" stroke="#08519c" stroke-width="1.5"/>"##);
    let _ = writeln!(s, r##"<polyline class="truth" points="{truth}" fill="none" stroke="#d62728" stroke-width="1.5"/>"##);
    let _ = writeln!(s, "</svg>");
    Ok(s)
}

/// Renders first, so an invalid series leaves no file behind.
pub fn emit_plot_svg(traj: &Trajectory, path: &Path) -> Result<()> {
    let svg = render_plot_svg(traj)?;
    fsutil::write_atomic(path, svg.as_bytes())
}
