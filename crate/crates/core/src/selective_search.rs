//! Shard assignment and query routing with a trained model.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::featurizer::SparseVector;
use crate::model::MicoModel;
use crate::par;

/// Document-to-shard assignment, aligned with corpus document order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShardMap {
    assignment: Vec<usize>,
    shard_sizes: Vec<usize>,
}

impl ShardMap {
    pub fn new(assignment: Vec<usize>, n_shards: usize) -> Result<Self> {
        let mut shard_sizes = vec![0; n_shards];
        for &s in &assignment {
            if s >= n_shards {
                return Err(Error::InvalidArgument(format!(
                    "shard {s} out of range for {n_shards} shards"
                )));
            }
            shard_sizes[s] += 1;
        }
        Ok(ShardMap {
            assignment,
            shard_sizes,
        })
    }

    pub fn shard_of(&self, doc: usize) -> usize {
        self.assignment[doc]
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn shard_sizes(&self) -> &[usize] {
        &self.shard_sizes
    }

    pub fn n_shards(&self) -> usize {
        self.shard_sizes.len()
    }

    pub fn n_docs(&self) -> usize {
        self.assignment.len()
    }

    /// Writes `doc_id\tshard_index` lines in corpus order.
    pub fn save(&self, corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let io = |e| Error::io(path, e);
        let mut out = BufWriter::new(fs::File::create(path).map_err(io)?);
        for (doc, &shard) in corpus.documents().iter().zip(&self.assignment) {
            writeln!(out, "{}\t{shard}", doc.id).map_err(io)?;
        }
        out.flush().map_err(io)
    }

    /// Reads a shard map; every corpus document must be listed.
    pub fn load(corpus: &Corpus, path: impl AsRef<Path>, n_shards: usize) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut assignment = vec![usize::MAX; corpus.documents().len()];
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let bad = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            };
            let (id, shard) = line
                .split_once('\t')
                .ok_or_else(|| bad("expected `doc_id\\tshard`".into()))?;
            let doc = corpus.doc_position(id).ok_or_else(|| Error::DanglingReference {
                kind: "document",
                id: id.to_string(),
            })?;
            assignment[doc] = shard.parse().map_err(|_| bad(format!("bad shard `{shard}`")))?;
        }
        if let Some(d) = assignment.iter().position(|&s| s == usize::MAX) {
            return Err(Error::InvalidArgument(format!(
                "shard map has no entry for document `{}`",
                corpus.documents()[d].id
            )));
        }
        ShardMap::new(assignment, n_shards)
    }
}

/// Shards ranked by score for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingResult {
    pub query_id: String,
    pub ranked_shards: Vec<(usize, f64)>,
}

impl RoutingResult {
    pub fn shards(&self) -> Vec<usize> {
        self.ranked_shards.iter().map(|&(s, _)| s).collect()
    }

    /// `query_id\tshard:score,...` with six decimals.
    pub fn to_line(&self) -> String {
        let ranked: Vec<String> = self
            .ranked_shards
            .iter()
            .map(|(s, p)| format!("{s}:{p:.6}"))
            .collect();
        format!("{}\t{}", self.query_id, ranked.join(","))
    }
}

/// Top `n` of `scores` by descending value, ties to the lowest index.
pub fn top_n(scores: &[f64], n: usize) -> Vec<(usize, f64)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(n);
    order.into_iter().map(|i| (i, scores[i])).collect()
}

/// Assigns each document to the argmax shard of the document tower.
pub fn assign_documents(model: &MicoModel, doc_features: &[SparseVector]) -> Result<ShardMap> {
    let assignment = par::map(doc_features, |x| {
        model.doc_tower().forward(x).map(|p| p.argmax())
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    ShardMap::new(assignment, model.n_clusters())
}

pub fn route_query(
    model: &MicoModel,
    query_id: &str,
    query_features: &SparseVector,
    n: usize,
) -> Result<RoutingResult> {
    let k = model.n_clusters();
    if n == 0 || n > k {
        return Err(Error::InvalidArgument(format!(
            "top-n must lie in [1, {k}], got {n}"
        )));
    }
    let probs = model.query_tower().forward(query_features)?;
    Ok(RoutingResult {
        query_id: query_id.to_string(),
        ranked_shards: top_n(probs.probs(), n),
    })
}

/// Routes the given corpus queries in parallel, preserving order.
pub fn route_queries(
    model: &MicoModel,
    corpus: &Corpus,
    query_features: &[SparseVector],
    queries: &[usize],
    n: usize,
) -> Result<Vec<RoutingResult>> {
    par::map(queries, |&q| {
        route_query(model, &corpus.queries()[q].id, &query_features[q], n)
    })
    .into_iter()
    .collect()
}

pub fn save_routing(results: &[RoutingResult], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let mut out = BufWriter::new(fs::File::create(path).map_err(io)?);
    for r in results {
        writeln!(out, "{}", r.to_line()).map_err(io)?;
    }
    out.flush().map_err(io)
}

/// Reads a routing file written by [`save_routing`].
pub fn load_routing(path: impl AsRef<Path>) -> Result<Vec<RoutingResult>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut results = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let bad = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let (id, ranked) = line
            .split_once('\t')
            .ok_or_else(|| bad("expected `query_id\\tshard:score,...`".into()))?;
        let ranked_shards = ranked
            .split(',')
            .filter(|f| !f.is_empty())
            .map(|field| {
                let (s, p) = field
                    .split_once(':')
                    .ok_or_else(|| bad(format!("bad entry `{field}`")))?;
                Ok((
                    s.parse().map_err(|_| bad(format!("bad shard `{s}`")))?,
                    p.parse().map_err(|_| bad(format!("bad score `{p}`")))?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        results.push(RoutingResult {
            query_id: id.to_string(),
            ranked_shards,
        });
    }
    Ok(results)
}

/// For each routed shard, in routing order, the relevant documents it holds.
pub fn retrieve(shard_map: &ShardMap, routing: &[usize], relevant: &[usize]) -> Vec<Vec<usize>> {
    routing
        .iter()
        .map(|&s| {
            relevant
                .iter()
                .copied()
                .filter(|&d| shard_map.shard_of(d) == s)
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DenseLayerParams, MarginalParams, TowerParams};

    /// A model whose towers output softmax(log(target)) for empty input.
    fn fixed_output(target: &[f64]) -> MicoModel {
        let k = target.len();
        let mut tower = TowerParams::zeros(1, 1, k);
        tower.output = DenseLayerParams {
            in_dim: 1,
            out_dim: k,
            weights: vec![0.0; k],
            bias: target.iter().map(|p| p.ln()).collect(),
        };
        MicoModel::from_parts(
            vec![tower],
            MarginalParams {
                logits: vec![0.0; k],
            },
        )
        .unwrap()
    }

    #[test]
    fn assignment_takes_argmax() {
        let m = fixed_output(&[0.1, 0.7, 0.2]);
        let map = assign_documents(&m, &[SparseVector::default()]).unwrap();
        assert_eq!(map.assignment(), &[1]);
        assert_eq!(map.shard_sizes(), &[0, 1, 0]);
    }

    #[test]
    fn assignment_tie_goes_to_lowest() {
        let m = fixed_output(&[0.5, 0.5]);
        let map = assign_documents(&m, &[SparseVector::default()]).unwrap();
        assert_eq!(map.assignment(), &[0]);
    }

    #[test]
    fn empty_corpus_has_empty_shards() {
        let m = fixed_output(&[0.5, 0.5]);
        let map = assign_documents(&m, &[]).unwrap();
        assert_eq!(map.shard_sizes(), &[0, 0]);
    }

    #[test]
    fn routing_ranks_by_probability() {
        let m = fixed_output(&[0.2, 0.5, 0.3]);
        let r = route_query(&m, "q", &SparseVector::default(), 2).unwrap();
        assert_eq!(r.shards(), vec![1, 2]);
        assert!((r.ranked_shards[0].1 - 0.5).abs() < 1e-12);
        assert!((r.ranked_shards[1].1 - 0.3).abs() < 1e-12);
        let all = route_query(&m, "q", &SparseVector::default(), 3).unwrap();
        let mut shards = all.shards();
        shards.sort();
        assert_eq!(shards, vec![0, 1, 2]);
        assert_eq!(route_query(&m, "q", &SparseVector::default(), 1).unwrap().shards(), vec![1]);
        assert!(route_query(&m, "q", &SparseVector::default(), 0).is_err());
        assert!(route_query(&m, "q", &SparseVector::default(), 4).is_err());
        assert_eq!(r.to_line(), "q\t1:0.500000,2:0.300000");
    }

    #[test]
    fn routing_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("routing.tsv");
        let results = vec![
            RoutingResult {
                query_id: "a".into(),
                ranked_shards: vec![(1, 0.5), (0, 0.25)],
            },
            RoutingResult {
                query_id: "b".into(),
                ranked_shards: vec![(2, 1.0)],
            },
        ];
        save_routing(&results, &path).unwrap();
        assert_eq!(load_routing(&path).unwrap(), results);
        fs::write(&path, "a\t1-0.5\n").unwrap();
        assert!(load_routing(&path).is_err());
    }

    #[test]
    fn retrieve_counts_per_routed_shard() {
        let map = ShardMap::new(vec![0, 0, 0, 1, 2, 1], 3).unwrap();
        assert_eq!(retrieve(&map, &[0], &[0, 1, 2]), vec![vec![0, 1, 2]]);
        assert_eq!(retrieve(&map, &[2], &[0, 1]), vec![Vec::<usize>::new()]);
        // Brute force: relevant {0, 1, 2, 3} split 3/1 over shards 0 and 1.
        let relevant = [0, 1, 2, 3];
        let routed = [1, 0];
        let got: Vec<usize> = retrieve(&map, &routed, &relevant).iter().map(Vec::len).collect();
        let expected: Vec<usize> = routed
            .iter()
            .map(|&s| relevant.iter().filter(|&&d| map.assignment()[d] == s).count())
            .collect();
        assert_eq!(got, expected);
        assert_eq!(got, vec![1, 3]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn top_n_is_a_prefix_of_the_full_ranking(
                scores in prop::collection::vec(0u8..6, 1..12),
            ) {
                let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
                let full = top_n(&scores, scores.len());
                prop_assert!(full.windows(2).all(|w| w[0].1 >= w[1].1));
                for n in 1..=scores.len() {
                    prop_assert_eq!(&top_n(&scores, n)[..], &full[..n]);
                }
            }

            #[test]
            fn scaling_logits_keeps_order(
                logits in prop::collection::vec(-3.0f64..3.0, 2..8),
                scale in 0.1f64..10.0,
            ) {
                let k = logits.len();
                let build = |factor: f64| {
                    let mut tower = TowerParams::zeros(1, 1, k);
                    tower.output.bias = logits.iter().map(|l| l * factor).collect();
                    MicoModel::from_parts(vec![tower], MarginalParams { logits: vec![0.0; k] }).unwrap()
                };
                let (a, b) = (build(1.0), build(scale));
                let x = SparseVector::default();
                prop_assert_eq!(
                    route_query(&a, "q", &x, k).unwrap().shards(),
                    route_query(&b, "q", &x, k).unwrap().shards()
                );
                prop_assert_eq!(
                    assign_documents(&a, std::slice::from_ref(&x)).unwrap(),
                    assign_documents(&b, std::slice::from_ref(&x)).unwrap()
                );
            }
        }
    }
}
