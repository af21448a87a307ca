//! Contrastive token-level relevance propagation (CT-LRP) for GNN rumour
//! classifiers over reply-propagation trees.
//!
//! The numeric core is generic over the scalar type ([`Scalar`]: `f32` or
//! `f64`); the aliases below fix it to `f64`, which every default path uses.

pub mod error;
pub mod evalharness;
pub mod explain;
mod fsutil;
pub mod graphdata;
pub mod model;
pub mod numkernel;
mod scalar;
pub mod textembed;

pub use error::{Error, Result};
pub use fsutil::write_atomic;
pub use scalar::Scalar;

pub type Matrix = numkernel::Matrix<f64>;
pub type BiGcn = model::BiGcnModel<f64>;
pub type BiGcn32 = model::BiGcnModel<f32>;
pub type Explainer<'m> = explain::Explainer<'m, f64>;
pub type Explanation = explain::Explanation<f64>;
pub type NodeRelevance = explain::NodeRelevance<f64>;
pub type TokenRelevance = textembed::TokenRelevance<f64>;
pub type Epsilon = numkernel::Epsilon<f64>;
