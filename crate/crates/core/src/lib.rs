//! Anchor-regularized robust finetuning of a toy image–text dual encoder.
//!
//! The crate covers a synthetic benchmark generator, the encoder towers with
//! hand-written backpropagation, the bidirectional contrastive loss, anchor
//! construction from generated captions and retrieved candidate pairs,
//! AdamW training loops, prompt-based evaluation with weight ensembling, and
//! the file formats and CLI that tie them together.

pub mod anchors;
pub mod benchgen;
pub mod cli;
pub mod contrastive;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod io;
pub mod numerics;
pub mod training;

pub use error::{ArfError, Result};
