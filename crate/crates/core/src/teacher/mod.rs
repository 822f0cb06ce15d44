//! Teachers: the closed-form oracle and the Transformer latency baseline.

pub mod oracle;
pub mod reference;

pub use oracle::{OracleConfig, OracleTeacher, PrefixMass};
pub use reference::{ReferenceConfig, ReferenceDecoder, ReferenceScorer};
