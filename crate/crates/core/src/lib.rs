//! Coherence and cohesion discriminators, an attention seq2seq generator,
//! and negative-critical sequence training that fine-tunes the generator
//! with discriminator rewards baselined by constructed negative pairs.

pub mod checkpoint;
pub mod corpus;
pub mod discriminator;
pub mod error;
pub mod generator;
pub mod graph;
pub mod nct;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod textmetrics;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use params::{Gradients, ParamId, Params};
pub use tensor::{DType, Real, Tensor};
