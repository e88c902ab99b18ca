//! File formats, configuration and the `tlm` command-line tool built on
//! [`tlm_core`].

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod job;
pub mod jsonl;
pub mod report;

pub use error::{Result, TlmError};
