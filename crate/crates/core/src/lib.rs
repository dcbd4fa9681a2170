//! Multi-source pose-guided image generation with residual-fusing blocks.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod kernels;
pub mod losses;
pub mod networks;
pub mod nn;
pub mod rng;
pub mod sweep;
pub mod train;

pub use error::{Error, Result};
pub use rfgen_autograd as autograd;
