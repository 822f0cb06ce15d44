//! The MLP student: decoder heads and the role-MLP encoder.

pub mod config;
pub mod decoder;
pub mod encoder;
mod nn;

pub use config::StudentConfig;
pub use decoder::{stack_states, teacher_digit_embeddings, MlpScorer, StudentDecoder};
pub use encoder::{assign_roles, EncoderConfig, StudentEncoder, Vocab};
