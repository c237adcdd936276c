//! Pinball and combined training losses.

use alloc::vec::Vec;

use thiserror::Error;

use crate::kpi::{Features, RESIDUAL};
use crate::model::{DecoderOutput, ModelError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LossError {
    #[error("quantile level {0} outside (0, 1)")]
    Quantile(f64),
    #[error("{0} predictions for {1} targets")]
    Length(usize, usize),
}

/// Asymmetric absolute loss whose minimizer is the `q`-quantile.
pub fn pinball_loss(y: f64, y_hat: f64, q: f64) -> Result<f64, LossError> {
    if !(q > 0.0 && q < 1.0) {
        return Err(LossError::Quantile(q));
    }
    Ok(if y > y_hat { q * (y - y_hat) } else { (1.0 - q) * (y_hat - y) })
}

/// Mean pinball loss over paired observations.
pub fn mean_pinball(y: &[f64], y_hat: &[f64], q: f64) -> Result<f64, LossError> {
    if y.len() != y_hat.len() || y.is_empty() {
        return Err(LossError::Length(y_hat.len(), y.len()));
    }
    let mut s = 0.0;
    for (a, b) in y.iter().zip(y_hat) {
        s += pinball_loss(*a, *b, q)?;
    }
    Ok(s / y.len() as f64)
}

/// Weights of the deterministic and quantile terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f32,
    pub beta: f32,
}

/// `alpha * MSE(det, targets[..8]) + beta * sum_q mean pinball_q(targets[8], quantile_q)`
/// recorded on the tape. `head` is the raw `[rows, n_det + quantiles]` output.
pub fn total_loss<'a>(
    tape: &mut Tape<'a>,
    head: Var,
    targets: &[Features],
    quantiles: &[f32],
    weights: LossWeights,
) -> Result<Var, ModelError> {
    let rows = targets.len();
    let width = tape.shape(head)[1];
    let n_det = width - quantiles.len();
    if tape.shape(head)[0] != rows {
        return Err(ModelError::Length { what: "target rows", expected: tape.shape(head)[0], actual: rows });
    }
    let det = tape.slice_cols(head, 0, n_det)?;
    let det_target: Vec<f32> = targets.iter().flat_map(|t| t[..n_det].iter().copied()).collect();
    let det_target = tape.constant(Tensor::from_vec(&[rows, n_det], det_target)?);
    let diff = tape.sub(det, det_target)?;
    let sq = tape.mul(diff, diff)?;
    let mse = tape.mean(sq)?;
    let mut total = tape.scale(mse, weights.alpha)?;

    let residual: Vec<f32> = targets.iter().map(|t| t[RESIDUAL]).collect();
    let residual = tape.constant(Tensor::from_vec(&[rows, 1], residual)?);
    for (i, &q) in quantiles.iter().enumerate() {
        let pred = tape.slice_cols(head, n_det + i, n_det + i + 1)?;
        let under = tape.sub(residual, pred)?;
        let over = tape.scale(under, -1.0)?;
        let under = tape.relu(under)?;
        let over = tape.relu(over)?;
        let under = tape.scale(under, q)?;
        let over = tape.scale(over, 1.0 - q)?;
        let per_step = tape.add(under, over)?;
        let mean = tape.mean(per_step)?;
        let weighted = tape.scale(mean, weights.beta)?;
        total = tape.add(total, weighted)?;
    }
    Ok(total)
}

/// Plain `f64` evaluation of the combined loss for a decoder output.
pub fn total_loss_value(
    output: &DecoderOutput,
    targets: &[Features],
    quantiles: &[f32],
    weights: LossWeights,
) -> Result<f64, LossError> {
    if output.steps() != targets.len() {
        return Err(LossError::Length(output.steps(), targets.len()));
    }
    let n_det = output.det.shape()[1];
    let mut sq = 0.0;
    for (k, t) in targets.iter().enumerate() {
        for (p, y) in output.det_row(k).iter().zip(&t[..n_det]) {
            sq += f64::from(p - y) * f64::from(p - y);
        }
    }
    let mse = sq / (targets.len() * n_det) as f64;
    let mut lq = 0.0;
    for (i, &q) in quantiles.iter().enumerate() {
        let y: Vec<f64> = targets.iter().map(|t| f64::from(t[RESIDUAL])).collect();
        let p: Vec<f64> = (0..targets.len()).map(|k| f64::from(output.quantile_row(k)[i])).collect();
        lq += mean_pinball(&y, &p, f64::from(q))?;
    }
    Ok(f64::from(weights.alpha) * mse + f64::from(weights.beta) * lq)
}
