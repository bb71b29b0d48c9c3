//! Simulation and analysis toolkit for Fock-state stimulated-emission
//! dark-matter searches with a cavity dispersively coupled to a qubit.

pub mod dmlimit;
pub mod error;
pub mod fit;
pub mod hmm;
pub mod pulsectl;
pub mod qstate;
pub mod trajsim;

pub use error::{Error, Result};

/// Crate version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
