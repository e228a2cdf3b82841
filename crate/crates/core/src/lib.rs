//! Unified encoder-decoder model with adapter-based task modules.
//!
//! A desk-scale transformer encoder-decoder over feature frames, extended
//! with per-layer adapter slots (single adapters, adapter stacking, adapter
//! fusion), trained with a hybrid CTC/attention objective where
//! classification labels are generated as reserved vocabulary tokens, and
//! decoded with joint CTC/attention beam search.

pub mod adapters;
pub mod autograd;
pub mod checkpoint;
pub mod decoder;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod optim;
pub mod taskspace;
pub mod toydata;

pub use autograd::{Array, Parameter, Tape, TensorId};
pub use error::{Error, Result};
