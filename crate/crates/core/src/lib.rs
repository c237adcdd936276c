//! Residual-PRB forecasting core.
//!
//! A `no_std` (alloc-only) implementation of a multi-embedding transformer
//! encoder-decoder that forecasts per-carrier LTE KPI vectors and quantiles of
//! the residual PRB ratio, together with its tape autodiff, training loop,
//! recursive block-wise rollout, and calibration metrics. File formats, CSV
//! ingestion and the command line live in the `rupformer` crate.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

mod kernels;
pub mod kpi;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rollout;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod time;
pub mod train;

pub use model::{DecoderOutput, Hyperparams, Mode, ModelInput, RupFormer};
pub use tape::{Tape, Var, MASKED};
pub use tensor::{ParamGrads, ParamId, ParamStore, Tensor, TensorError};
pub use train::TrainConfig;
