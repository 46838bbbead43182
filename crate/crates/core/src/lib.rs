//! Interpretable binary text embeddings.
//!
//! Every embedding dimension is a yes/no question. Questions are generated
//! per cluster of a corpus by contrasting positive texts against hard and
//! easy negatives ([`cqg`]), answered cheaply by small per-question
//! classifier heads over a frozen encoder ([`mbqa`]), and evaluated on
//! similarity, retrieval and clustering tasks ([`eval`]).

pub mod binary;
pub mod cluster;
pub mod cost;
pub mod corpus;
pub mod cqg;
pub mod eval;
pub mod hashing;
pub mod mbqa;
pub mod prompts;
pub mod providers;
pub mod pipeline;
pub mod synthetic;
