//! Quasi-stationary distributions for one-dimensional diffusions
//! `dX = dB - q(X) dt` killed at the origin.

pub mod cli;
pub mod conditioned;
pub mod drift_expr;
pub mod eigen;
pub mod error;
pub mod measures;
pub mod montecarlo;
pub mod numeric;
pub mod plot;
pub mod qsd;

pub use drift_expr::{parse_drift, DriftSpec};
pub use error::{QsdError, Result};
pub use measures::Diffusion;
