//! Co-trained document sharding and query routing for selective search.
//!
//! A document-allocation network and a query-routing network are trained
//! jointly on query/document relevance logs so that a query and its relevant
//! documents land in the same shard, while an entropy term keeps shard sizes
//! balanced. After training, every document is assigned to its argmax shard
//! and unseen queries are routed to their highest-scoring shards.
//!
//! Modules, bottom-up:
//! - [`corpus`]: documents, queries, graded relevance edges, splits, and a
//!   planted-cluster synthetic generator.
//! - [`featurizer`]: tokenization, vocabulary, TF-IDF sparse vectors.
//! - [`model`]: the query tower, document tower and variational marginal.
//! - [`trainer`]: batch loss estimators, the interleaved minimax schedule,
//!   Adam with clipping and early stopping.
//! - [`selective_search`]: shard maps and query routing.
//! - [`evaluation`]: coverage, cost and balance metrics.
//! - [`baselines`]: random, k-means and balanced k-means sharding.

pub mod baselines;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod featurizer;
pub mod model;
pub mod par;
pub mod selective_search;
pub mod trainer;
mod util;

pub use error::{Error, Result};
