//! Multilevel Picard particle methods for McKean–Vlasov SDEs.

pub mod analysis;
pub mod config;
pub mod error;
pub mod measures;
pub mod models;
pub mod planner;
pub mod rng;
pub mod schemes;
pub mod time_grid;

pub use error::{Error, Result};

/// Library version, recorded in output headers.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
