//! Multi-hop logical query answering over incomplete knowledge graphs with
//! single-point embeddings and neural logical operators.

pub mod bundle;
pub mod checkpoint;
pub mod eval;
pub mod kg;
pub mod ops;
pub mod query;
pub mod sampler;
pub mod synth;
pub mod tensor;
pub mod train;
