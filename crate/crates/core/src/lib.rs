//! Herb prescription recommendation from symptoms, patient attributes, and a
//! herb knowledge graph.
//!
//! The pipeline: attribute-prompted sequence encoding ([`pepp`]), knowledge-graph
//! propagation and co-occurrence graph attention ([`kgprop`]), conditional
//! diffusion over herb embeddings ([`dmsh`]), syndrome attention
//! ([`syndrome`]), the monarch/minister/assistant compatibility network
//! ([`hierarchy`]), and final scoring and training ([`recommender`]).

pub mod autograd;
pub mod corpus;
pub mod dmsh;
pub mod error;
pub mod eval;
pub mod hierarchy;
pub mod kgprop;
pub mod nn;
pub mod par;
pub mod pepp;
pub mod recommender;
pub mod rng;
pub mod syndrome;
pub mod tensor;

pub use error::{Error, Result};
pub use par::Exec;
pub use tensor::Tensor;
