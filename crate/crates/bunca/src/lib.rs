//! Bundle recommendation with causation-enhanced multi-view learning.
//!
//! The model scores user–bundle pairs from two representation branches:
//! a cohesive view that propagates embeddings over a unified user–bundle
//! graph, and a coherent view built from item-level signals, where a
//! multi-prospect causation network turns symmetric item co-occurrence
//! into asymmetric item-to-item influence weights. Training couples a
//! pairwise ranking loss with discrete and concrete contrastive terms,
//! all differentiated exactly through the crate's own reverse-mode tape.

pub mod autodiff;
pub mod cohesive;
pub mod coherent;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod objective;
pub mod params;
mod par;
pub mod sparse;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Mat;
