//! Neighboring-extremal adaptation of constrained discrete-time optimal
//! control solutions under exogenous preview signals.

pub mod costates;
pub mod diagnostics;
pub mod ene;
pub mod error;
pub mod io;
pub mod mene;
pub mod model;
pub mod numerics;
pub mod ocp;
pub mod oracle;
pub mod sim;
pub mod systems;

pub use error::{EneError, Result};
pub use numerics::{Mat, Vector};
