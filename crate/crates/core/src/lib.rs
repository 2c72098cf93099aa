//! Scene recognition by fusing object and scene evidence.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense tensors, a define-by-run autodiff [`Tape`], the `FOST`
//!   tensor file format and a finite-difference gradient checker.
//! * [`layers`]: zero-padded and partial (boundary-rescaled) convolution,
//!   pooling, dense layers, batch norm and the GAP-FC / 1×1-conv head pair.
//! * [`losses`]: scene coherence loss over per-cell grid scores, grid-pooled
//!   cross-entropy and their weighted total.
//! * [`fusion`]: sum, concatenate, class conversion (CCM), correlative context
//!   gating (CCG), CCG with batch norm, and mixed CCM-CCG.
//! * [`model`]: miniature object and places backbones, the assembled
//!   two-stream network, checkpoints and class activation maps.
//! * [`data`]: a synthetic scene dataset, augmentation and class-balanced batching.
//! * [`runner`]: SGD with momentum, learning-rate schedule, training,
//!   top-k and 10-crop evaluation and ablation sweeps.

pub mod data;
pub mod error;
pub mod fusion;
pub mod layers;
pub mod losses;
pub mod model;
pub mod runner;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
