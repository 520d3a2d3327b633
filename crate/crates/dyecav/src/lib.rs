//! Kinetics of a multimode photon gas coupled to a pumped dye reservoir:
//! scene construction, rate-equation kernels, a projected hierarchy for the
//! molecular field, stiff integration, quench experiments and their analysis.

pub mod analysis;
pub mod cli;
pub mod config;
pub mod error;
pub mod experiments;
pub mod hierarchy;
pub mod kernel;
pub mod model;
pub mod output;
pub mod solver;

pub use error::{ConfigError, SolverError};
