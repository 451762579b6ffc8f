//! Curriculum demonstration selection for in-context learning.

pub mod corpus;
pub mod curriculum;
pub mod embeddings;
pub mod evaluation;
pub mod inference;
pub mod prompting;
pub mod runner;
pub mod scalar;
pub mod selection;

pub use scalar::Scalar;

pub type EmbeddingStore32 = embeddings::EmbeddingStore<f32>;
pub type EmbeddingStore64 = embeddings::EmbeddingStore<f64>;
