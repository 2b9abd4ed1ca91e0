//! Sequential tag recommendation.
//!
//! A user's chronologically ordered post history and tag history are mixed
//! by a stack of all-MLP layers (sequence, channel and fusion mixers), pooled,
//! and fused with the current post's document embedding to score every
//! candidate tag. Training is manual backpropagation with Adam.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod mixer;
pub mod model;
pub mod scalar;
pub mod synth;
pub mod tagspace;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
