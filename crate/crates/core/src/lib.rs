//! Differentiable quantile normalization built on entropic optimal transport,
//! and low-rank factorization models that learn per-feature quantile maps
//! jointly with their factors.

pub mod check;
pub mod error;
pub mod factor;
pub mod implicit;
pub mod io;
pub mod ot;
pub mod params;
pub mod soft;
pub mod synth;

pub use error::{Error, Result};
