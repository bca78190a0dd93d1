//! AGOP-based attribution on a synthetic tetromino benchmark.
//!
//! The crate bundles everything needed to reproduce the benchmark end to
//! end: a small reverse-mode tensor engine ([`tensor`]), the data generator
//! ([`data`]), the CNN8by8 model and its trainer ([`model`], [`train`]),
//! training-time AGOP diagonal accumulation ([`agop`]), nine attribution
//! methods ([`attribution`]) and the localisation / faithfulness metrics
//! ([`metrics`]).

pub mod agop;
pub mod attribution;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
