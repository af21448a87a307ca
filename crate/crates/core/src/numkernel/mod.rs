//! Dense numeric primitives and a recording tape that lets gradients and
//! relevance flow backward through exactly the computation that ran.

mod matrix;
pub mod rules;
mod tape;

pub use matrix::Matrix;
pub use rules::{
    aggregate_forward, excitation_aggregate_backward, excitation_linear_backward,
    excitation_mean_readout_backward, linear_forward, lrp_aggregate_backward, lrp_linear_backward,
    lrp_mean_readout_backward, lrp_relu_backward, mean_readout_forward, relu_forward, Epsilon,
};
pub use tape::{Gradients, LayerKind, LayerTrace, LinearGrad, RelevanceRule, Tape, ValueId};
