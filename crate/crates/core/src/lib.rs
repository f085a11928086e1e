//! Composable identity control for multi-character story illustration, at
//! desk scale.
//!
//! Each character owns an independently trained low-rank adapter on a frozen
//! denoiser. At inference the adapters relevant to a prompt are merged with
//! logistic relevance weights:
//!
//! ```text
//! W* = W + Σ_c w_c · B_c A_c
//! w_c = logistic(α · cos(text(p), text(Φ_c)) + β · cos(text'(p), refs(I_c)))
//! ```
//!
//! Modules, bottom-up:
//!
//! * [`lowrank`] dense and low-rank matrix algebra, weighted fusion.
//! * [`backbone`] a small conditional MLP denoiser, forward noising, sampling.
//! * [`trainer`] backbone pre-training and frozen-backbone adapter training.
//! * [`promptc`] the hierarchical prompt compiler.
//! * [`fusion`] embedders, relevance weights, fusion plans.
//! * [`metrics`] IS / PFS / ICS / T-ICS / T-ICS_Emb and the composite objective.

pub mod backbone;
pub mod error;
pub mod fusion;
pub mod lowrank;
pub mod metrics;
pub mod promptc;
pub mod seed;
pub mod trainer;

pub use error::{Error, Result};
