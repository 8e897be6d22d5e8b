//! Human-object interaction scoring with a dual relation graph.
//!
//! The crate turns precomputed detections, appearance features and a word
//! embedding table into ⟨human, action, object⟩ predictions:
//!
//! * [`geometry`] boxes, IoU, the two-channel interaction pattern and jitter;
//! * [`spatial_semantic`] the per-pair node feature (spatial ConvNet output
//!   concatenated with the object's word embedding);
//! * [`drg`] human-centric and object-centric subgraphs with attentional
//!   aggregation;
//! * [`streams`] the human, object and spatial-semantic heads and score fusion;
//! * [`training`] multi-label loss, pair sampling and SGD;
//! * [`evaluation`] role mean average precision;
//! * [`pipeline`] file formats, configuration and the batch commands used by
//!   the `drg` binary.
//!
//! All numerics are `f64` and every backward pass is written by hand; see
//! [`numkernel::finite_diff_check`] for the oracle used to verify them.

#![allow(clippy::needless_range_loop)]

pub mod checkpoint;
pub mod drg;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod model;
pub mod numkernel;
pub mod pipeline;
pub mod spatial_semantic;
pub mod streams;
pub mod training;

pub use error::{Error, Result};
pub use numkernel::Tensor;
