//! Coarse-to-fine contribution network for multimodal summarization.
//!
//! This crate is `no_std` (with `alloc`) and holds everything that is pure
//! computation: a small reverse-mode autodiff engine ([`tensor`]), the
//! single-stream multimodal encoder with a recurrent attention decoder
//! ([`model`]), the coarse pre-filter ([`prefilter`]), the word and phrase
//! complement objectives ([`word`], [`phrase`]), the combined training
//! objective ([`objective`]), evaluation metrics ([`metrics`]) and the
//! corpus types plus synthetic data generator ([`data`]).
//!
//! File formats, the training loop driver, experiments and the CLI live in
//! the companion `cfsum` crate.
#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod phrase;
pub mod prefilter;
pub mod tensor;
pub mod word;

pub use error::{Error, Result};
