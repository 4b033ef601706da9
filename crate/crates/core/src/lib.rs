//! Latency models for speculative decoding under continuous-batching LLM
//! serving, with fitting, a batching simulator and a command-line front end.

pub mod cli;
pub mod error;
pub mod fit;
pub mod io;
pub mod model;
pub mod moe;
pub mod sim;
pub mod spec;

pub use error::{Error, Result};
