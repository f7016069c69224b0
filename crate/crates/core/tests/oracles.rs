//! Hand-computed reference values, frozen as literals.
#![allow(clippy::excessive_precision)]

use selsearch_core::corpus::{generate_synthetic, SyntheticSpec};
use selsearch_core::evaluation::{coverage_at, shard_balance};
use selsearch_core::featurizer::{build_vocab, tfidf, FeatureSet, FeaturizerConfig, SparseVector};
use selsearch_core::model::{DenseLayerParams, MarginalParams, MicoModel, TowerParams};
use selsearch_core::selective_search::{retrieve, ShardMap};
use selsearch_core::trainer::objective::{biased_batch_entropy, entropy_bound};
use selsearch_core::trainer::{cross_entropy_term, entropy_plus_term, query_consistency_term, Batch};

/// 1 / (2 + e)
const SOFTMAX_010_LOW: f64 = 0.211_941_557_617_085_445_1;
/// e / (2 + e)
const SOFTMAX_010_HIGH: f64 = 0.576_116_884_765_829_109_9;
/// -(0.5 ln 0.9 + 0.5 ln 0.1)
const CROSS_HALF_VS_09: f64 = 1.203_972_804_325_935_993;
/// H(0.8, 0.2)
const ENTROPY_08: f64 = 0.500_402_423_538_187_879_5;
/// H(1/2, 1/4, 1/4)
const ENTROPY_211: f64 = 1.039_720_770_839_917_964_1;
/// H(1/2, 1/4, 1/4) / ln 3
const NORMALIZED_211: f64 = 0.946_394_630_357_186_155_6;

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12
}

/// A shared tower mapping the unit vector `e_i` to the distribution `rows[i]`.
fn lookup_model(rows: &[&[f64]]) -> MicoModel {
    let n = rows.len();
    let k = rows[0].len();
    let mut identity = vec![0.0; n * n];
    for i in 0..n {
        identity[i * n + i] = 1.0;
    }
    let tower = TowerParams {
        hidden: DenseLayerParams {
            in_dim: n,
            out_dim: n,
            weights: identity,
            bias: vec![0.0; n],
        },
        output: DenseLayerParams {
            in_dim: n,
            out_dim: k,
            weights: rows.iter().flat_map(|r| r.iter().map(|p| p.ln())).collect(),
            bias: vec![0.0; k],
        },
    };
    MicoModel::from_parts(vec![tower], MarginalParams { logits: vec![0.0; k] }).unwrap()
}

fn unit_features(n: usize) -> FeatureSet {
    let e: Vec<SparseVector> = (0..n).map(|i| SparseVector::new(vec![(i, 1.0)]).unwrap()).collect();
    FeatureSet {
        queries: e.clone(),
        docs: e,
        query_dim: n,
        doc_dim: n,
    }
}

#[test]
fn softmax_of_known_logits() {
    let tower = TowerParams {
        hidden: DenseLayerParams {
            in_dim: 1,
            out_dim: 1,
            weights: vec![1.0],
            bias: vec![0.0],
        },
        output: DenseLayerParams {
            in_dim: 1,
            out_dim: 3,
            weights: vec![0.0, 1.0, 0.0],
            bias: vec![0.0; 3],
        },
    };
    let p = tower.forward(&SparseVector::new(vec![(0, 1.0)]).unwrap()).unwrap();
    assert!(close(p.probs()[0], SOFTMAX_010_LOW));
    assert!(close(p.probs()[1], SOFTMAX_010_HIGH));
    assert!(close(p.probs()[2], SOFTMAX_010_LOW));
}

#[test]
fn cross_entropy_and_consistency_terms() {
    let model = lookup_model(&[&[0.5, 0.5], &[0.9, 0.1]]);
    let features = unit_features(2);
    // Query 1 routes with (0.9, 0.1); document 0 is sharded with (0.5, 0.5).
    let batch = Batch {
        pairs: vec![(1, 0)],
        consistency: vec![(0, 1)],
    };
    assert!(close(cross_entropy_term(&model, &features, &batch).unwrap(), CROSS_HALF_VS_09));
    assert!(close(query_consistency_term(&model, &features, &batch).unwrap(), CROSS_HALF_VS_09));
}

#[test]
fn entropy_bound_on_two_clusters() {
    let model = lookup_model(&[&[1.0 - 1e-300, 1e-300], &[0.6, 0.4]]);
    // Mean of (1, 0) and (0.6, 0.4) is (0.8, 0.2); g is uniform.
    let batch = Batch {
        pairs: vec![(0, 0), (0, 1)],
        consistency: vec![],
    };
    let bound = entropy_plus_term(&model, &unit_features(2), &batch).unwrap();
    assert!(close(bound, std::f64::consts::LN_2));
    let m = [vec![0.8, 0.2]];
    assert!(close(biased_batch_entropy(&m), ENTROPY_08));
    assert!(bound > ENTROPY_08);
    assert!(close(entropy_bound(&m, &[0.8f64.ln(), 0.2f64.ln()]), ENTROPY_08));
}

#[test]
fn tfidf_drops_terms_present_everywhere() {
    let docs = vec![vec!["a".to_string(), "b".to_string()], vec!["a".to_string()]];
    let vocab = build_vocab(&docs, 10).unwrap();
    let v = tfidf(&docs[0], &vocab, &FeaturizerConfig::default());
    let b = vocab.index_of("b").unwrap();
    assert_eq!(v.entries(), &[(b, 1.0)]);
}

#[test]
fn coverage_and_retrieval_counts() {
    // Shards: docs 0-2 in 0, doc 3 in 1, doc 4 in 2.
    let map = ShardMap::new(vec![0, 0, 0, 1, 2], 3).unwrap();
    let relevant = [0, 1, 2, 3];
    assert_eq!(coverage_at(&relevant, &map, &[0, 1, 2], 1), Some(0.75));
    let hits: Vec<usize> = retrieve(&map, &[0, 1], &relevant).iter().map(Vec::len).collect();
    assert_eq!(hits, vec![3, 1]);
}

#[test]
fn normalized_entropy_of_2_1_1() {
    let balance = shard_balance(&ShardMap::new(vec![0, 0, 1, 2], 3).unwrap());
    assert!(close(balance.normalized_entropy * 3f64.ln(), ENTROPY_211));
    assert!(close(balance.normalized_entropy, NORMALIZED_211));
}

#[test]
fn full_noise_scatters_edges_uniformly() {
    let synth = generate_synthetic(&SyntheticSpec {
        n_groups: 4,
        docs_per_group: 100,
        queries_per_group: 600,
        noise_rate: 1.0,
        seed: 5,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let edges: Vec<(usize, usize)> = synth.corpus.indexed_edges().map(|(q, d, _)| (q, d)).collect();
    assert!(edges.len() >= 10_000);
    let within = edges
        .iter()
        .filter(|&&(q, d)| synth.query_groups[q] == synth.doc_groups[d])
        .count() as f64
        / edges.len() as f64;
    // Binomial standard error is sqrt(0.25 * 0.75 / 12000) = 0.004.
    assert!((within - 0.25).abs() < 0.016, "{within}");
}
