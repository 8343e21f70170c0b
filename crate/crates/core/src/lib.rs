//! Desk-scale global weather forecasting: a recurrent windowed-attention
//! forecaster at low resolution, followed by a conditional denoising-diffusion
//! super-resolution stage, plus the verification stack (latitude-weighted
//! RMSE, CSI, Fréchet feature distance) and a synthetic data generator so
//! every experiment runs without a reanalysis archive.
//!
//! Module map:
//! - [`tensor`]: a small reverse-mode autodiff engine over `ndarray` f64
//!   arrays (graph, ops, parameter store, finite-difference checking).
//! - [`grid`]: gridded data model, variable catalog, normalization,
//!   synthetic generator, dataset I/O and sample-pair construction.
//! - [`swin`]: windowed-attention building blocks with longitude-periodic
//!   window handling (cube/patch embedding, partition/merge, blocks).
//! - [`forecaster`]: the recurrent encoder/decoder with multi-layer feature
//!   aggregation and the multi-scale ablation variant.
//! - [`diffusion`]: variance schedules, forward/reverse processes, the
//!   conditional U-shaped denoiser, respaced fast sampling, ensembles.
//! - [`metrics`]: latitude-weighted RMSE, CSI, Fréchet distance over a
//!   frozen feature network, wind speed, ensemble utilities.
//! - [`pipeline`]: experiment configs, staged training, evaluation reports,
//!   ablation runners and map plotting.

pub mod error;
pub mod forecaster;
pub mod swin;
pub mod grid;
pub mod metrics;
pub mod tensor;


pub use error::{Error, Result};
