//! Test-time learning for small decoder-only language models.
//!
//! The crate is `no_std` (with `alloc`) so the numerical core can be embedded
//! anywhere; file formats, the CLI and experiment orchestration live in the
//! `tlm` companion crate.
//!
//! Layout:
//! - [`autodiff`]: define-by-run reverse-mode engine over `f64` tensors, plus a
//!   central-difference oracle; [`gradcheck`] runs it against every primitive.
//! - [`model`]: byte tokenizer, transformer, greedy decoding, pretraining.
//! - [`lora`]: low-rank adapters on the query/value projections.
//! - [`ttl`]: perplexity measurement, sample selection, weighted loss, Adam and
//!   the offline/online adaptation loops.
//! - [`diagnostics`]: cross-gradient, Taylor-residual, trend, contribution and
//!   forgetting studies.
//! - [`corpus`] and [`metrics`]: synthetic shifted domains, ROUGE-Lsum and
//!   exact match.

#![cfg_attr(not(feature = "std"), no_std)]
// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod autodiff;
pub mod corpus;
pub mod diagnostics;
mod error;
pub mod gradcheck;
pub mod lora;
pub mod math;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod ttl;

pub use error::{Error, Result};
