//! Disentangled music representation learning lab for cover song
//! identification.
//!
//! The crate trains a small encoder so that different performances of the same
//! song embed close together while performance-specific factors (pitch
//! transposition, performer timbre) are suppressed. Two mechanisms drive the
//! disentanglement:
//!
//! - a knowledge-guided module that minimizes a contrastive log-ratio upper
//!   bound on the mutual information between representations and known
//!   version-variant factors ([`kdm`]), and
//! - a gradient-guided adversarial module that identifies variant elements
//!   from transition-cost gradients between paired versions, attenuates them
//!   with a softmax-derived mask, and aligns the masked/unmasked populations
//!   with a discriminator ([`gadm`]).
//!
//! Everything runs on a synthetic cover-song corpus with known ground-truth
//! factors ([`synthcover`]), so each claim has a checkable oracle. Retrieval
//! quality is scored with MAP / P@10 / MR1 ([`retrieval`]). The `discover`
//! binary wires the pieces together ([`cli`]).

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod encoder;
pub mod error;
pub mod gadm;
pub mod gradcheck;
pub mod kdm;
pub mod opt;
pub mod retrieval;
pub mod synthcover;
pub mod training;

pub use config::Config;
pub use error::{DiscoverError, Result};
