//! Core library for domain-adversarial cross-corpus utterance classification.
//!
//! Everything numerical lives here: a small reverse-mode autodiff engine
//! ([`autodiff`]), the logMel audio frontend ([`features`]), the
//! encoder/classifier model ([`model`]), the adversarial training loop with
//! its batch-normalization data-combination strategies ([`training`]), and
//! manifest/label/synthetic-data handling ([`data`]).
//!
//! The crate is `no_std` (with `alloc`); file formats, WAV ingest and the
//! command-line frontend live in the companion `dann` crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod autodiff;
pub mod data;
pub mod error;
pub mod features;
pub mod model;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
