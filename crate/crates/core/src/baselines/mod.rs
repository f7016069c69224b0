//! Sharding baselines: random assignment, k-means and balanced k-means
//! over the TF-IDF features, each with its own query router.

pub mod kmeans;
pub mod random;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Split};
use crate::error::{Error, Result};
use crate::featurizer::{FeatureSet, SparseVector};
use crate::par;
use crate::selective_search::{RoutingResult, ShardMap};

pub use kmeans::{balanced_assign, AssignRule, Centroids, Clustering};
pub use random::{random_shard, RandomRouter};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Random,
    Kmeans,
    BalancedKmeans,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Random => "random",
            Method::Kmeans => "kmeans",
            Method::BalancedKmeans => "balanced-kmeans",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Method::Random),
            "kmeans" | "k-means" => Ok(Method::Kmeans),
            "balanced-kmeans" | "balanced_kmeans" | "balanced-k-means" => Ok(Method::BalancedKmeans),
            other => Err(Error::InvalidArgument(format!(
                "unknown baseline `{other}` (expected random, kmeans or balanced-kmeans)"
            ))),
        }
    }
}

/// Centroids fitted on documents and training queries together, with the
/// resulting document shard map.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidModel {
    pub centroids: Centroids,
    pub assignment: ShardMap,
    pub objective_history: Vec<f64>,
    pub iterations: usize,
}

impl CentroidModel {
    pub fn n_clusters(&self) -> usize {
        self.centroids.len()
    }

    pub fn route(&self, x: &SparseVector, n: usize) -> Vec<(usize, f64)> {
        let mut ranked = self.centroids.rank(x);
        ranked.truncate(n);
        ranked
    }
}

fn stack(docs: &[SparseVector], train_queries: &[SparseVector]) -> Vec<SparseVector> {
    docs.iter().chain(train_queries).cloned().collect()
}

/// Plain Lloyd k-means; documents go to their nearest centroid.
pub fn kmeans_shard(
    docs: &[SparseVector],
    train_queries: &[SparseVector],
    dim: usize,
    k: usize,
    seed: u64,
    max_iters: usize,
) -> Result<CentroidModel> {
    let points = stack(docs, train_queries);
    let c = kmeans::lloyd(&points, dim, k, seed, max_iters, AssignRule::Nearest)?;
    let doc_assignment = c.assignment[..docs.len()].to_vec();
    Ok(CentroidModel {
        assignment: ShardMap::new(doc_assignment, k)?,
        centroids: c.centroids,
        objective_history: c.objective_history,
        iterations: c.iterations,
    })
}

/// k-means with capacity-constrained assignment. The final shard map is a
/// balanced assignment of the documents alone against the final centroids.
pub fn balanced_kmeans_shard(
    docs: &[SparseVector],
    train_queries: &[SparseVector],
    dim: usize,
    k: usize,
    seed: u64,
    max_iters: usize,
) -> Result<CentroidModel> {
    if k > docs.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot balance {} documents over {k} shards",
            docs.len()
        )));
    }
    let points = stack(docs, train_queries);
    let c = kmeans::lloyd(&points, dim, k, seed, max_iters, AssignRule::Balanced)?;
    let doc_assignment = balanced_assign(docs, &c.centroids);
    Ok(CentroidModel {
        assignment: ShardMap::new(doc_assignment, k)?,
        centroids: c.centroids,
        objective_history: c.objective_history,
        iterations: c.iterations,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum Router {
    Random(RandomRouter),
    Centroid(CentroidModel),
}

/// A baseline's shard map together with the router that goes with it.
#[derive(Debug, Clone, PartialEq)]
pub struct Baseline {
    pub method: Method,
    pub shard_map: ShardMap,
    pub router: Router,
}

impl Baseline {
    /// Fits `method` on the corpus. Clustering baselines need queries and
    /// documents in one feature space.
    pub fn fit(
        method: Method,
        corpus: &Corpus,
        features: &FeatureSet,
        k: usize,
        seed: u64,
        max_iters: usize,
    ) -> Result<Self> {
        if method == Method::Random {
            return Ok(Baseline {
                method,
                shard_map: random_shard(features.docs.len(), k, seed)?,
                router: Router::Random(RandomRouter { n_shards: k, seed }),
            });
        }
        if features.query_dim != features.doc_dim {
            return Err(Error::InvalidArgument(
                "k-means baselines need a shared query/document vocabulary".into(),
            ));
        }
        let train: Vec<SparseVector> = corpus
            .queries_in(Split::Train)
            .into_iter()
            .map(|q| features.queries[q].clone())
            .collect();
        let fit = if method == Method::Kmeans {
            kmeans_shard
        } else {
            balanced_kmeans_shard
        };
        let model = fit(&features.docs, &train, features.doc_dim, k, seed, max_iters)?;
        Ok(Baseline {
            method,
            shard_map: model.assignment.clone(),
            router: Router::Centroid(model),
        })
    }

    pub fn n_shards(&self) -> usize {
        self.shard_map.n_shards()
    }

    pub fn route_query(&self, query: usize, query_id: &str, x: &SparseVector, n: usize) -> Result<RoutingResult> {
        let k = self.n_shards();
        if n == 0 || n > k {
            return Err(Error::InvalidArgument(format!(
                "top-n must lie in [1, {k}], got {n}"
            )));
        }
        let ranked_shards = match &self.router {
            Router::Random(r) => {
                let uniform = 1.0 / k as f64;
                r.ranking(query).into_iter().take(n).map(|s| (s, uniform)).collect()
            }
            Router::Centroid(m) => m.route(x, n),
        };
        Ok(RoutingResult {
            query_id: query_id.to_string(),
            ranked_shards,
        })
    }

    pub fn route_queries(
        &self,
        corpus: &Corpus,
        query_features: &[SparseVector],
        queries: &[usize],
        n: usize,
    ) -> Result<Vec<RoutingResult>> {
        par::map(queries, |&q| {
            self.route_query(q, &corpus.queries()[q].id, &query_features[q], n)
        })
        .into_iter()
        .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, GradeFilter, SyntheticSpec};
    use crate::evaluation::evaluate;
    use crate::featurizer::{FeaturizerConfig, Vocabularies};

    fn synthetic() -> (Corpus, FeatureSet) {
        let synth = generate_synthetic(&SyntheticSpec {
            docs_per_group: 60,
            queries_per_group: 30,
            noise_rate: 0.0,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let fc = FeaturizerConfig::default();
        let vocabs = Vocabularies::build(&synth.corpus, &fc).unwrap();
        let features = FeatureSet::compute(&synth.corpus, &vocabs, &fc);
        (synth.corpus, features)
    }

    fn cov(baseline: &Baseline, corpus: &Corpus, features: &FeatureSet, n: usize) -> f64 {
        let queries = corpus.queries_in(Split::Test);
        let routed = baseline.route_queries(corpus, &features.queries, &queries, n).unwrap();
        let rankings: Vec<Vec<usize>> = routed.iter().map(|r| r.shards()).collect();
        let relevant = corpus.relevant_docs(&GradeFilter::All);
        evaluate(&baseline.shard_map, &queries, &rankings, &relevant, &[n], 0)
            .unwrap()
            .coverage[&n]
    }

    #[test]
    fn method_names_round_trip() {
        for m in [Method::Random, Method::Kmeans, Method::BalancedKmeans] {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
        assert!("imsat".parse::<Method>().is_err());
    }

    #[test]
    fn one_shard_covers_everything() {
        let (corpus, features) = synthetic();
        for m in [Method::Random, Method::Kmeans, Method::BalancedKmeans] {
            let b = Baseline::fit(m, &corpus, &features, 1, 0, 10).unwrap();
            assert_eq!(cov(&b, &corpus, &features, 1), 1.0, "{m}");
        }
    }

    #[test]
    fn kmeans_finds_planted_groups() {
        let (corpus, features) = synthetic();
        let km = Baseline::fit(Method::Kmeans, &corpus, &features, 4, 3, 50).unwrap();
        let random = Baseline::fit(Method::Random, &corpus, &features, 4, 3, 50).unwrap();
        assert!(cov(&km, &corpus, &features, 1) > cov(&random, &corpus, &features, 1) + 0.2);
        let bal = Baseline::fit(Method::BalancedKmeans, &corpus, &features, 4, 3, 50).unwrap();
        let sizes = bal.shard_map.shard_sizes();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn random_routes_are_reproducible() {
        let (corpus, features) = synthetic();
        let b = Baseline::fit(Method::Random, &corpus, &features, 8, 21, 0).unwrap();
        let queries = corpus.queries_in(Split::Test);
        let a1 = b.route_queries(&corpus, &features.queries, &queries, 3).unwrap();
        let a2 = b.route_queries(&corpus, &features.queries, &queries, 3).unwrap();
        assert_eq!(a1, a2);
        assert!(b.route_query(0, "q", &features.queries[0], 0).is_err());
        assert!(b.route_query(0, "q", &features.queries[0], 9).is_err());
    }
}
