//! Depth-recurrent sequence-to-sequence transformer.
//!
//! The crate is `no_std` (with `alloc`): it holds the numerical core and all
//! model logic, while file formats, configuration files and the command line
//! live in the `loopformer` companion crate.
//!
//! Layout:
//! - [`tensor`]: dense `f64` tensors and a reverse-mode differentiation tape.
//! - [`nn`]: pre-LN attention, feed-forward, encoder and decoder layers.
//! - [`recurrent`]: layer schedules (stacked, shared-loop, closed-chain), the
//!   block-recurrent model and parameter accounting.
//! - [`train`]: learning-rate schedule, Adam, training steps, checkpoints.
//! - [`data`]: vocabularies, synthetic tasks and token-bounded batching.
//! - [`decode`] and [`bleu`]: greedy/beam decoding and corpus BLEU.
//! - [`gradcheck`]: finite-difference and clone-and-sum gradient suites.

#![cfg_attr(not(test), no_std)]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod bleu;
pub mod data;
pub mod decode;
pub mod error;
pub mod gradcheck;
pub mod math;
pub mod nn;
pub mod recurrent;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use recurrent::{LayerSchedule, Model, ModelConfig, ShareMode, StackConfig};
pub use tensor::{Tape, Tensor, Var};
