//! Desk-scale laboratory for soft-constrained cross-modal knowledge
//! distillation.
//!
//! A frozen teacher encoder supervises a trainable student encoder from a
//! different input modality. Supervision is deliberately *soft*: a
//! margin-hinged feature distance that stops pulling once the two embeddings
//! agree closely enough, or a shared classifier over the mixed teacher and
//! student features. A quality module derives per-sample distillation
//! weights from feature norms so low-quality inputs cannot mislead the
//! student. Everything runs on a small dense-tensor engine with exact
//! reverse-mode gradients, over a synthetic paired-modality benchmark with
//! controllable shared/specific structure, and is scored with open-set
//! verification metrics (EER, minDCF), closed-set accuracy, and forced-choice
//! cross-modal matching.

pub mod data;
pub mod error;
pub mod eval;
pub mod harness;
pub mod losses;
pub mod models;
pub mod numeric;
pub mod quality;

pub use error::{Error, Result};
pub use numeric::{Optimizer, OptimizerKind, ParamSet, Tape, Tensor, ValueId};
