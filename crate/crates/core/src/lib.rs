//! Ranking-oriented two-tower transformer personalization.
//!
//! The crate covers the full desk-scale pipeline: a synthetic e-commerce
//! simulator, dataset construction, a small reverse-mode autodiff engine,
//! item/user/context towers, retrieval pre-training and calibrated ranking
//! fine-tuning, batch embedding export, and offline evaluation.

pub mod autodiff;
pub mod checks;
pub mod config;
pub mod dataset;
pub mod eval;
pub mod event;
pub mod model;
pub mod objectives;
pub mod params;
pub mod pipeline;
pub mod serving;
pub mod synth;
pub mod tensor;
pub mod text;
pub mod trainer;

pub use autodiff::{Graph, Var};
pub use params::{Gradients, ParamGroup, ParamId, ParamStore};
pub use tensor::{Tensor, TensorError};
