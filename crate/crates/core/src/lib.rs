//! Contrastive-grouping referring segmentation at desk scale.
//!
//! The crate is layered bottom-up: a small `f64` tensor engine with
//! reverse-mode differentiation ([`graph`], [`ops`]), parameter storage and
//! AdamW ([`params`]), then the model: toy encoders ([`encoders`]), the group
//! transformer ([`group`]), the consecutive decoder ([`decoder`]), objectives
//! and metrics ([`objectives`], [`metrics`]), tied together in [`model`].

pub mod checkpoint;
pub mod config;
pub mod decoder;
pub mod encoders;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod group;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod ops;
#[cfg(any(test, feature = "oracle"))]
pub mod oracle;
pub mod params;
pub mod rng;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use error::{Error, Result};
pub use graph::{DetachLog, Graph, Var};
pub use params::{AdamW, ParamId, ParamStore};
pub use rng::Rng;
pub use tensor::Tensor;
