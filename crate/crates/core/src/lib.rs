//! Simulation and analysis of quantum sensing with repetitive error
//! correction on a two-qubit register: an NV electron spin used as the
//! sensor and a ¹³C nuclear spin used as memory.
//!
//! The crate is layered bottom-up:
//!
//! * [`hilbert`]: operators, basis states and density matrices.
//! * [`dynamics`]: the dephasing master equation, drives and rotations.
//! * [`channels`]: error injection, optical reset and nuclear readout.
//! * [`sequences`]: encode/decode, error-correction rounds, sensing blocks.
//! * [`experiments`]: end-to-end protocol runners producing curves.
//! * [`estimation`]: least-squares fits, posteriors over γ, sensitivity.
//!
//! All matrices use the basis order `|0↑⟩, |0↓⟩, |−1↑⟩, |−1↓⟩`.
//! Frequencies are plain Hz everywhere in the public API; the conversion
//! to angular units happens inside [`dynamics`].

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod channels;
pub mod dynamics;
mod error;
pub mod estimation;
pub mod experiments;
pub mod hilbert;
pub mod rng;
pub mod sequences;

pub use error::{Error, Result};
