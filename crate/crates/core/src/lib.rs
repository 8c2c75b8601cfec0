//! Schrödinger bridges for regime-switching jump diffusions.
//!
//! The crate builds discretised transition kernels, solves the static Schrödinger
//! system by a multi-regime Sinkhorn iteration, propagates the potentials, samples
//! bridge paths under the optimal controls and checks the results against the
//! Kolmogorov equations.

pub mod config;
pub mod error;
pub mod expr;
pub mod grid;
pub mod io;
pub mod kernel;
pub mod model;
pub mod potentials;
pub mod quad;
pub mod simulate;
pub mod sinkhorn;
pub mod usbp;
pub mod verify;

pub use error::{Error, ErrorClass, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
