//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records every primitive application against an immutable
//! parameter store; [`Graph::backward`] sweeps the record once in reverse.
//! [`gradcheck`] compares the result against central finite differences.

mod graph;
pub mod gradcheck;

pub use graph::{
    Backward, Graph, Primitive, Var, ATTENTION_MASK_LOGIT, L2_NORM_FLOOR, LAYER_NORM_EPS,
};
