//! Minimal reverse-mode automatic differentiation.
//!
//! Values live on a [`Tape`]; trainable state lives in a [`ParamStore`].
//! A forward pass reads parameters onto the tape, and
//! [`Tape::backward`] writes `d(loss)/d(param)` back into the store.

mod adam;
mod array;
mod check;
pub mod conv;
mod params;
mod tape;

pub use adam::{Adam, AdamConfig};
pub use array::Array;
pub use check::{finite_difference_check, GradCheckReport, HasParams};
pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{BatchStats, NormMode, Tape, Var};

#[allow(unused_imports)]
pub(crate) use tape::{sigmoid, softmax_in_place};
