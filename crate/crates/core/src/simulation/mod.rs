//! Simulation scenarios and the replication engine.

mod engine;
mod models;
mod scenarios;

pub use engine::*;
pub use models::*;
pub use scenarios::*;
