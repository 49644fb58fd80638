//! Incremental few-shot learning by searching for flat minima during base
//! training and fine-tuning inside the flat region afterwards.

pub mod analysis;
pub mod autodiff;
pub mod bench;
pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod net;
pub mod proto;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
