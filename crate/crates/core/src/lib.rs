//! Few-shot adaptation of a small dual-encoder model.
//!
//! The crate is organized bottom-up: [`tensor`] (autodiff and AdamW),
//! [`model`] (towers, pretraining), [`peft`] (trainable-set strategies),
//! [`adapt`] (two-stage training), [`infer`] (selective prediction and
//! metrics), [`dynamics`] (curves, breakpoints, sweeps) and [`synth`]
//! (synthetic data). [`bench`] wires up the bundled reference benchmark and
//! [`reference`] holds independent oracles used in tests.

pub mod adapt;
pub mod bench;
pub mod checkpoint;
pub mod dynamics;
mod error;
pub mod infer;
pub mod model;
pub mod peft;
pub mod reference;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
