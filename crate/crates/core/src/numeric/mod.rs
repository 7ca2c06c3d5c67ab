//! Dense numerical substrate: matrices, a gradient tape, Adam and a
//! finite-difference checker.

mod gradcheck;
mod matrix;
mod optim;
mod params;
mod tape;

pub use gradcheck::{grad_check, relative_error, GradCheckReport, GRAD_FLOOR};
pub use matrix::{argmax, Matrix};
pub use optim::{AdamConfig, OptimizerState};
pub use params::{flatten_grads, ParamId, ParamStore};
pub use tape::{
    cross_entropy, softmax, softplus, softplus_inverse, DropoutStream, Gradients, Tape, Var,
    LAYER_NORM_EPS, PROB_FLOOR,
};
