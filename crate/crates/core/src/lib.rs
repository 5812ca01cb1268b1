//! Structured-component neural forecasting for multivariate time series.

pub mod cli;
pub mod config;
pub mod data;
pub mod decouple;
pub mod error;
pub mod extrapolate;
pub mod fuse;
pub mod network;
pub mod stream;
pub mod tape;
pub mod train;

pub use error::{Error, Result};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;
