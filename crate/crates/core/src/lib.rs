pub mod config;
pub mod duality;
pub mod engine;
pub mod error;
mod linalg;
pub mod market;
pub mod rng;
pub mod montecarlo;
pub mod oracles;
pub mod pde;
pub mod sde;

pub use error::{Error, Result};
