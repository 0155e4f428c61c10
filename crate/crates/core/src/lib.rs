//! Unsupervised domain adaptation for embedding networks whose source and
//! target domains have disjoint class sets.
//!
//! The training procedure has three stages:
//!
//! 1. pre-training on labeled source data with a multi-kernel MMD penalty
//!    between source and target activations ([`pipeline::pretrain`]);
//! 2. pseudo-labeling the target set by connected components of a
//!    thresholded cosine-similarity graph ([`clusterer`]) and pre-adapting a
//!    target classifier head on those labels ([`pipeline::pre_adapt`]);
//! 3. adapting on all target data with a mutual-information loss
//!    ([`losses::mi_loss`], [`pipeline::mi_adapt`]).
//!
//! Stages 2 and 3 alternate until the pseudo-label partition stops changing
//! ([`pipeline::run_iman`]). [`evalkit`] implements the pair-verification
//! protocol (10-fold accuracy, ROC, TAR@FAR) used to score the result.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod clusterer;
pub mod dataio;
pub mod error;
pub mod evalkit;
pub mod kernelmmd;
pub mod losses;
pub mod numcore;
pub mod pipeline;

pub use error::{Error, Result};
pub use numcore::{Gradients, Matrix, ParamStore, Tape, Var};
