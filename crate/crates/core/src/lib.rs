//! Estimation of under-reporting in continuous incidence time series.
//!
//! The registered series is modelled as a per-month mixture of the true
//! incidence and a shrunken copy of it. The crate fits that model by maximum
//! likelihood, reconstructs the most likely true series, checks the
//! residuals for whiteness, and turns the reconstruction into incidence,
//! projection and cost tables.

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod diagnostics;
pub mod error;
pub mod estimation;
pub mod ingest;
pub mod model;
pub mod reconstruction;
pub mod simulate;

pub use error::{Error, Result};
pub use estimation::{fit, FitOptions, FitResult, ModelVariant};
pub use model::{
    AgeBand, DesignRow, Link, ModelConfig, ModelParams, Observation, ObservationSeries, Sex,
    StratumKey, VarianceMode,
};
pub use simulate::{simulate, SimOutput, SimScenario};
