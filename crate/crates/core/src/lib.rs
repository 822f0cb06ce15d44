//! Prefix-conditioned MLP decoding for semantic-ID recommenders, with the
//! training, decoding and measurement machinery around it.

pub mod bench;
pub mod catalog;
pub mod checkpoint;
pub mod decode;
pub mod error;
pub mod evaluate;
pub mod experiment;
pub mod graph;
pub mod kernels;
pub mod loss;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod student;
pub mod synth;
pub mod tape;
pub mod train;
pub mod teacher;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Eval, Graph, Spans, MASKED_LOGIT};
pub use params::{ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
