//! Reverse-mode differentiation over a small tensor op-set, with
//! reverse-over-reverse second-order products.

mod engine;
mod tape;

pub use engine::{
    cross_vp, grad, hvp, value, value_and_grads, AnchorGraph, FnObjective, Objective,
};
pub use tape::{NodeId, Tape, Var};
