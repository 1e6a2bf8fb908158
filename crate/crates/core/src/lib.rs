//! Structure-aware adapter tuning with language-guided modulation over a
//! frozen toy vision transformer, on a from-scratch reverse-mode autodiff.

pub mod adapter;
pub mod autodiff;
pub mod backbone;
pub mod error;
pub mod harness;
pub mod lgm;
pub mod model;
pub mod params;
pub mod structure;
pub mod tensor;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use model::{BatchInputs, ModelConfig, Pathways, SlgNet};
pub use params::{ModuleKind, ParamId, ParamStore, Session};
pub use tensor::Tensor;
