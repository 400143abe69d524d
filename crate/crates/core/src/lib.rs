//! History-aware conversational dense retrieval.
//!
//! The crate covers the whole experimental loop for conversational passage
//! retrieval at desk scale:
//!
//! * [`corpus`]: passages, sessions, qrels, and a synthetic topic-shift generator.
//! * [`encode`]: hashed lexical features, a frozen random-projection passage
//!   encoder and a trainable linear query encoder.
//! * [`index`]: exact top-k search and TREC run files.
//! * [`eval`]: MRR, NDCG@k and Recall@k.
//! * [`prj`]: pseudo relevance judgments of historical turns.
//! * [`supervision`]: context-denoised reformulation and positive/negative mining.
//! * [`trainer`]: contrastive loss, analytic gradient and Adam.
//! * [`pipeline`]: end-to-end experiment orchestration shared by the CLI.
//!
//! Numerical code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the 64-bit instantiation used by the pipeline.

pub mod config;
pub mod corpus;
pub mod encode;
pub mod error;
pub mod eval;
pub mod index;
pub mod pipeline;
pub mod prj;
pub mod rng;
pub mod scalar;
pub mod supervision;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Dense embedding in 64-bit floating point.
pub type Embedding = encode::EmbeddingVector<f64>;
/// Sparse hashed feature vector in 64-bit floating point.
pub type Features = encode::FeatureVector<f64>;
/// Frozen passage encoder in 64-bit floating point.
pub type PassageEncoder = encode::PassageEncoder<f64>;
/// Trainable query encoder parameters in 64-bit floating point.
pub type QueryEncoder = encode::QueryEncoderParams<f64>;
/// Exact dense index in 64-bit floating point.
pub type DenseIndex = index::DenseIndex<f64>;
/// Ranked retrieval result with 64-bit scores.
pub type RankedList = index::RankedList<f64>;
/// Row-major matrix in 64-bit floating point.
pub type Matrix = encode::Matrix<f64>;
/// Adam optimizer state in 64-bit floating point.
pub type AdamState = trainer::AdamState<f64>;
