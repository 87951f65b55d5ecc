//! Multi-round, multi-task task-oriented communications.
//!
//! An encoder turns an image into a handful of channel symbols, the symbols
//! cross a noisy channel, and a decoder classifies what arrives. The
//! two-round variant trains a second encoder/decoder pair whose decoder sees
//! both rounds' received symbols, and a confidence threshold decides per
//! sample whether the second round is requested at all.

pub mod analysis;
pub mod channel;
pub mod cli;
pub mod models;
pub mod protocol;
pub mod dataset;
pub mod error;
pub mod nn;
pub mod rng;

pub use error::{Error, Result};
