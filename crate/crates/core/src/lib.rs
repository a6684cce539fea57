//! Algorithmic core of a small-sample speech recognition toolkit.
//!
//! Everything here is a pure function of its inputs (plus explicit seeded
//! random streams), usable without the standard library.

#![no_std]

extern crate alloc;

pub mod audio;
pub mod cer;
pub mod corpus;
pub mod ctc;
pub mod error;
pub mod features;
pub mod grad;
pub mod mask;
pub mod model;
pub mod objective;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
