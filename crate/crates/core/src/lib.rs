//! Alignment-based non-autoregressive sequence modelling.
//!
//! The crate is organized bottom-up:
//!
//! - [`types`]: vocabulary, label sequences, alignments, partial alignments.
//! - [`dp`]: CTC and mask-constrained dynamic programs over a score lattice.
//! - [`oracle`]: brute-force enumeration used to cross-check the DP.
//! - [`policies`]: roll-in sampling (shift noise and masking).
//! - [`model`]: the conditional network, its manual backward pass and checkpoints.
//! - [`trainer`]: losses, synthetic data and the training loop.
//! - [`decoder`]: iterative block and top-k decoding.
//! - [`cli`]: the `imputer` command-line tool.

pub mod cli;
pub mod decoder;
pub mod dp;
pub mod error;
pub mod model;
pub mod optim;
pub mod oracle;
pub mod policies;
pub mod selfcheck;
pub mod trainer;
pub mod types;

pub use error::{CheckpointError, Error, Result};
pub use types::{Alignment, BlockSpec, LabelSeq, PartialAlignment, Symbol, Vocab, BLANK};
