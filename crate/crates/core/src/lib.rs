//! Synthesis and verification of neural vector Lyapunov-Razumikhin
//! certificates for discrete-time interconnected systems with delays.

pub mod benchmarks;
pub mod cegis;
pub mod certificate;
pub mod config;
pub mod error;
pub mod io;
pub mod evaluation;
pub mod neural;
pub mod reachability;
pub mod rng;
pub mod scalability;
pub mod synthesis;
pub mod verification;
pub mod system;

pub use error::{Error, Result};
