//! Meta-gradients through unrolled SGD and momentum-SGD inner loops.
//!
//! The crate provides a reverse-mode engine with Hessian-vector and mixed
//! second-order products ([`ad`]), the optimizer dynamics and their adjoints
//! ([`dynamics`]), meta-gradient estimators behind a common trait with a
//! by-name registry ([`metagrad`]), the frozen-gradient coefficient algebra
//! for momentum SGD ([`coeff`]), and small synthetic tasks ([`tasks`]).

pub mod ad;
pub mod coeff;
pub mod dynamics;
pub mod error;
pub mod metagrad;
pub mod tasks;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{rel_error, Batch, ParamGroup, Tensor};
