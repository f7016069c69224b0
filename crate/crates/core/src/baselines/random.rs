use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::selective_search::ShardMap;
use crate::util;

/// Uniform seeded assignment of `n_docs` documents to `k` shards.
pub fn random_shard(n_docs: usize, k: usize, seed: u64) -> Result<ShardMap> {
    if k == 0 {
        return Err(Error::InvalidArgument("need at least one shard".into()));
    }
    let mut rng = util::sub_rng(seed, 0);
    let assignment = (0..n_docs).map(|_| rng.gen_range(0..k)).collect();
    ShardMap::new(assignment, k)
}

/// Routes each query to a seeded random permutation of the shards.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RandomRouter {
    pub n_shards: usize,
    pub seed: u64,
}

impl RandomRouter {
    /// The permutation depends only on the seed and the query's corpus position.
    pub fn ranking(&self, query: usize) -> Vec<usize> {
        let mut rng = util::sub_rng(self.seed, 1 + query as u64);
        let mut order: Vec<usize> = (0..self.n_shards).collect();
        order.shuffle(&mut rng);
        order
    }
}
