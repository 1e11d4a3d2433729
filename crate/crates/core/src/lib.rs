//! Physics-guided increment training for inductive spatio-temporal kriging.
//!
//! The crate estimates PM2.5 at unmonitored sites from a sensor network.
//! Training graphs are padded with virtual nodes so they match the size of
//! the inference graph, edge weights are generated per window from a
//! diffusion operator and a learned wind-driven advection operator, and a
//! two-phase cycle turns first-pass estimates into pseudo-labels.
//!
//! Module map:
//!
//! | module | contents |
//! |--------|----------|
//! | [`stations`] | station metadata, distance kernel graph, virtual nodes, masks |
//! | [`physics`] | diffusion/advection operators, fusion, graph integrator |
//! | [`autodiff`] | tensors, reverse-mode tape, Adam, checkpoints |
//! | [`model`] | wind field, spatio-temporal graph convolution, forward pass |
//! | [`train`] | cycle regulation, losses, training loop with early stopping |
//! | [`data`] | observation CSVs, splits, windows, synthetic datasets |
//! | [`eval`] | MAE/MAPE/MRE, KNN baseline, reports |
//! | [`config`] | run configuration files |
//! | [`pipeline`] | train/evaluate/infer/simulate jobs used by the binary |
//! | [`gradcheck`] | finite-difference check of every parameter gradient |
//! | [`rng`] | seeded random streams |
//! | [`error`] | error type |

pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod physics;
pub mod pipeline;
pub mod rng;
pub mod stations;
pub mod train;

pub use error::{Error, Result};
