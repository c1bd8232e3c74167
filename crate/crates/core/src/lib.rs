//! G-estimation of optimal dynamic treatment regimes when the recorded
//! treatment is an error-prone proxy for the treatment actually taken.

pub mod error;
pub mod gest;
pub mod glm;
pub mod inference;
pub mod linalg;
pub mod model;
pub mod par;
pub mod rng;
pub mod simulation;

pub use error::{Error, Result};
