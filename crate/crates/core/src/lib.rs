//! Multi-hop dense retrieval with momentum posterior regularization on a
//! synthetic knowledge-graph corpus.

pub mod config;
pub mod corpus;
pub mod curves;
pub mod encoder;
pub mod eval;
pub mod index;
pub mod objective;
pub mod pipeline;
pub mod retriever;
pub mod trainer;
