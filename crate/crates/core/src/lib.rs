//! Desk-scale sparse mixture-of-experts laboratory.
//!
//! A small decoder-only language model trained under interchangeable routing
//! algorithms, with every routing decision logged and a suite of routing
//! diagnostics computed from those logs.

pub mod data;
pub mod diagnostics;
pub mod error;
pub mod experiments;
pub mod model;
pub mod moe;
pub mod numeric;
pub mod trainer;

pub use error::{Error, Result};
