//! Desk-scale laboratory for studying low-rank adapters with orthogonal
//! subspace regularization: tiny models, exact-gradient training, and
//! measurement tools for the capacity/forgetting trade-off.

pub mod adapter;
pub mod error;
pub mod grad;
pub mod harness;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod trainer;

pub use error::{Error, Result};
