//! Scale-adaptive spatiotemporal super-resolution of gridded precipitation.
//!
//! The pipeline decomposes video super-resolution for a factor pair `(S, T)`
//! into a deterministic mean predictor (a U-Net with factorized spatiotemporal
//! attention) and a conditional diffusion model of the residuals, with an
//! optional mass-conservation transform that pins predicted totals to the
//! low-resolution input. A verification suite (MSE/MAE/99th-percentile
//! error/LSD/EMD/SSIM/PITD/CRPS) scores ensembles, and a small tuning layer
//! implements the three-knob retuning recipe (context length, noise schedule
//! amplitude, conservation function) across factor pairs.

pub mod config;
pub mod conserve;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod field;
pub mod grid;
pub mod gridio;
pub mod metrics;
pub mod nets;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod tune;

pub use config::{Preset, RunConfig};
pub use conserve::{ConservationSpec, FFamily};
pub use error::CoreError;
pub use field::{Field, FieldSequence, SRFactors};
pub use metrics::{EnsembleForecast, MetricReport};

pub type Result<T> = std::result::Result<T, CoreError>;
