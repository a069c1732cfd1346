//! Layer-pruning laboratory for small decoder-only transformers.
//!
//! The crate trains a toy character-level teacher, measures how much each
//! block matters (Block Influence or the aggregate-score drop caused by
//! removing it), removes blocks one at a time and heals the pruned student
//! by distilling from the frozen teacher's logits and hidden states.

pub mod distill;
pub mod error;
pub mod eval;
pub mod par;
pub mod rng;
pub mod strategies;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
