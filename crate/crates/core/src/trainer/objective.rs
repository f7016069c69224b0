//! Batch estimators of the co-training losses and their gradients.
//!
//! For a batch of `b` query/document pairs with document distributions `p_i`,
//! query distributions `s_i` and marginal `g`:
//!
//! - cross term: `(1/b) sum_i sum_k -p_ik log s_ik`
//! - entropy bound: `sum_k -m_k log g_k` with `m = (1/b) sum_i p_i`
//! - consistency term (query-consistency variant): mean over sampled
//!   document pairs of `sum_k -p1_k log p2_k`
//!
//! The plain loss is `cross - beta * bound`; the consistency variant uses
//! `-beta * bound + (cross + gamma * consistency) / (1 + gamma)`. Both the
//! cross term and the bound are per-pair averages, so their batch means are
//! unbiased for the full-data values.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurizer::FeatureSet;
use crate::model::{MicoModel, TowerParams, TowerTrace};
use crate::par;
use crate::util;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Mico,
    #[serde(alias = "mico-q")]
    MicoQ,
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "mico" => Ok(Variant::Mico),
            "mico-q" | "mico_q" => Ok(Variant::MicoQ),
            other => Err(format!("unknown variant `{other}` (expected mico or mico-q)")),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Mico => "mico",
            Variant::MicoQ => "mico-q",
        })
    }
}

/// Which loss to assemble from the batch terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSpec {
    pub variant: Variant,
    pub beta: f64,
    pub gamma: f64,
}

impl LossSpec {
    pub fn total(&self, h_cross: f64, h_plus: f64, h_q: f64) -> f64 {
        match self.variant {
            Variant::Mico => h_cross - self.beta * h_plus,
            Variant::MicoQ => {
                -self.beta * h_plus + (h_cross + self.gamma * h_q) / (1.0 + self.gamma)
            }
        }
    }
}

/// Indices into a [`FeatureSet`]: `(query, doc)` pairs and, for the
/// consistency variant, `(doc, doc)` pairs relevant to a common query.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Batch {
    pub pairs: Vec<(usize, usize)>,
    pub consistency: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub h_cross: f64,
    pub h_plus: f64,
    pub h_q: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.h_cross.is_finite() && self.h_plus.is_finite() && self.h_q.is_finite() && self.total.is_finite()
    }
}

// Distribution-level estimators. Rows are per-example vectors over K.

/// `(1/b) sum_i sum_k -target_ik * log_pred_ik`.
pub fn mean_cross_entropy(target: &[Vec<f64>], log_pred: &[Vec<f64>]) -> f64 {
    assert_eq!(target.len(), log_pred.len());
    if target.is_empty() {
        return 0.0;
    }
    let sum: f64 = target
        .iter()
        .zip(log_pred)
        .map(|(p, l)| p.iter().zip(l).map(|(p, l)| -p * l).sum::<f64>())
        .sum();
    sum / target.len() as f64
}

pub fn batch_mean(rows: &[Vec<f64>]) -> Vec<f64> {
    let k = rows.first().map_or(0, Vec::len);
    let mut mean = vec![0.0; k];
    for row in rows {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    let n = rows.len().max(1) as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    mean
}

/// `sum_k -m_k log g_k` with `m` the batch mean of `doc_probs`.
pub fn entropy_bound(doc_probs: &[Vec<f64>], marginal_log_probs: &[f64]) -> f64 {
    batch_mean(doc_probs)
        .iter()
        .zip(marginal_log_probs)
        .map(|(m, l)| -m * l)
        .sum()
}

/// Entropy of the batch-mean document distribution. This plug-in estimate
/// is biased (the log is taken inside the batch) and is only a diagnostic.
pub fn biased_batch_entropy(doc_probs: &[Vec<f64>]) -> f64 {
    util::entropy(&batch_mean(doc_probs))
}

/// Forward values of every tower evaluation a batch needs.
pub struct BatchForward {
    pub queries: Vec<TowerTrace>,
    pub docs: Vec<TowerTrace>,
    pub consistency: Vec<(TowerTrace, TowerTrace)>,
    pub marginal_log_probs: Vec<f64>,
}

impl BatchForward {
    pub fn run(model: &MicoModel, features: &FeatureSet, batch: &Batch) -> Result<Self> {
        if batch.pairs.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let traced = par::map(&batch.pairs, |&(q, d)| -> Result<(TowerTrace, TowerTrace)> {
            Ok((
                model.query_tower().trace(&features.queries[q])?,
                model.doc_tower().trace(&features.docs[d])?,
            ))
        });
        let mut queries = Vec::with_capacity(traced.len());
        let mut docs = Vec::with_capacity(traced.len());
        for item in traced {
            let (q, d) = item?;
            queries.push(q);
            docs.push(d);
        }
        let consistency = par::map(&batch.consistency, |&(d1, d2)| -> Result<(TowerTrace, TowerTrace)> {
            Ok((
                model.doc_tower().trace(&features.docs[d1])?,
                model.doc_tower().trace(&features.docs[d2])?,
            ))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        Ok(BatchForward {
            queries,
            docs,
            consistency,
            marginal_log_probs: model.marginal.log_probs(),
        })
    }

    pub fn doc_probs(&self) -> Vec<Vec<f64>> {
        self.docs.iter().map(TowerTrace::probs).collect()
    }

    pub fn h_cross(&self) -> f64 {
        let query_log: Vec<Vec<f64>> = self.queries.iter().map(|t| t.log_probs.clone()).collect();
        mean_cross_entropy(&self.doc_probs(), &query_log)
    }

    pub fn h_plus(&self) -> f64 {
        entropy_bound(&self.doc_probs(), &self.marginal_log_probs)
    }

    pub fn h_q(&self) -> f64 {
        let first: Vec<Vec<f64>> = self.consistency.iter().map(|(a, _)| a.probs()).collect();
        let second: Vec<Vec<f64>> = self
            .consistency
            .iter()
            .map(|(_, b)| b.log_probs.clone())
            .collect();
        mean_cross_entropy(&first, &second)
    }

    pub fn breakdown(&self, spec: &LossSpec) -> LossBreakdown {
        let h_cross = self.h_cross();
        let h_plus = self.h_plus();
        let h_q = match spec.variant {
            Variant::Mico => 0.0,
            Variant::MicoQ => self.h_q(),
        };
        LossBreakdown {
            h_cross,
            h_plus,
            h_q,
            total: spec.total(h_cross, h_plus, h_q),
        }
    }
}

pub fn cross_entropy_term(model: &MicoModel, features: &FeatureSet, batch: &Batch) -> Result<f64> {
    Ok(BatchForward::run(model, features, batch)?.h_cross())
}

pub fn entropy_plus_term(model: &MicoModel, features: &FeatureSet, batch: &Batch) -> Result<f64> {
    Ok(BatchForward::run(model, features, batch)?.h_plus())
}

/// Zero when the batch carries no consistency pairs.
pub fn query_consistency_term(model: &MicoModel, features: &FeatureSet, batch: &Batch) -> Result<f64> {
    Ok(BatchForward::run(model, features, batch)?.h_q())
}

pub fn mico_loss(model: &MicoModel, features: &FeatureSet, batch: &Batch, spec: &LossSpec) -> Result<LossBreakdown> {
    let out = BatchForward::run(model, features, batch)?.breakdown(spec);
    if !out.total.is_finite() {
        return Err(Error::Diverged(format!("non-finite loss {out:?}")));
    }
    Ok(out)
}

/// Gradients of the tower loss with respect to each tower block (same
/// layout as [`MicoModel::towers`]) and of the entropy bound with respect
/// to the marginal logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub towers: Vec<TowerParams>,
    pub theta: Vec<f64>,
}

impl Gradients {
    pub fn tower_norm(&self) -> f64 {
        self.towers
            .iter()
            .flat_map(|t| t.blocks())
            .flat_map(|b| b.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.theta.iter().all(|v| v.is_finite())
            && self
                .towers
                .iter()
                .flat_map(|t| t.blocks())
                .all(|b| b.iter().all(|v| v.is_finite()))
    }
}

/// Gradient of `probs . cost` with respect to the logits behind `probs`:
/// `p_j (cost_j - p . cost)`.
fn softmax_expectation_grad(probs: &[f64], cost: &[f64], scale: f64, out: &mut [f64]) {
    let mean: f64 = probs.iter().zip(cost).map(|(p, c)| p * c).sum();
    for ((o, p), c) in out.iter_mut().zip(probs).zip(cost) {
        *o += scale * p * (c - mean);
    }
}

/// Gradient of `-target . log_softmax(logits)` with respect to the logits:
/// `softmax(logits) - target` (target sums to one).
fn cross_entropy_logit_grad(log_probs: &[f64], target: &[f64], scale: f64, out: &mut [f64]) {
    for ((o, l), t) in out.iter_mut().zip(log_probs).zip(target) {
        *o += scale * (l.exp() - t);
    }
}

/// `d bound / d theta = softmax(theta) - m`.
pub fn marginal_gradient(doc_probs: &[Vec<f64>], marginal_log_probs: &[f64]) -> Vec<f64> {
    batch_mean(doc_probs)
        .iter()
        .zip(marginal_log_probs)
        .map(|(m, l)| l.exp() - m)
        .collect()
}

/// Tower gradients of the assembled loss from precomputed forward values.
pub fn tower_gradients(model: &MicoModel, features: &FeatureSet, batch: &Batch, fwd: &BatchForward, spec: &LossSpec) -> Vec<TowerParams> {
    let k = model.n_clusters();
    let b = batch.pairs.len() as f64;
    let (cross_weight, q_weight) = match spec.variant {
        Variant::Mico => (1.0, 0.0),
        Variant::MicoQ => (1.0 / (1.0 + spec.gamma), spec.gamma / (1.0 + spec.gamma)),
    };
    let neg_log_marginal: Vec<f64> = fwd.marginal_log_probs.iter().map(|l| -l).collect();
    let mut grads: Vec<TowerParams> = model.towers().iter().map(TowerParams::zeros_like).collect();
    let doc_slot = model.doc_tower_slot();

    for (i, &(q, d)) in batch.pairs.iter().enumerate() {
        let qt = &fwd.queries[i];
        let dt = &fwd.docs[i];
        let p = dt.probs();
        let neg_log_query: Vec<f64> = qt.log_probs.iter().map(|l| -l).collect();

        let mut dq = vec![0.0; k];
        cross_entropy_logit_grad(&qt.log_probs, &p, cross_weight / b, &mut dq);
        let mut dd = vec![0.0; k];
        softmax_expectation_grad(&p, &neg_log_query, cross_weight / b, &mut dd);
        softmax_expectation_grad(&p, &neg_log_marginal, -spec.beta / b, &mut dd);

        model
            .query_tower()
            .backprop(&features.queries[q], qt, &dq, &mut grads[0]);
        model
            .doc_tower()
            .backprop(&features.docs[d], dt, &dd, &mut grads[doc_slot]);
    }

    if spec.variant == Variant::MicoQ && !batch.consistency.is_empty() && q_weight != 0.0 {
        let c = batch.consistency.len() as f64;
        for (&(d1, d2), (t1, t2)) in batch.consistency.iter().zip(&fwd.consistency) {
            let p1 = t1.probs();
            let neg_log_p2: Vec<f64> = t2.log_probs.iter().map(|l| -l).collect();
            let mut g1 = vec![0.0; k];
            softmax_expectation_grad(&p1, &neg_log_p2, q_weight / c, &mut g1);
            let mut g2 = vec![0.0; k];
            cross_entropy_logit_grad(&t2.log_probs, &p1, q_weight / c, &mut g2);
            model
                .doc_tower()
                .backprop(&features.docs[d1], t1, &g1, &mut grads[doc_slot]);
            model
                .doc_tower()
                .backprop(&features.docs[d2], t2, &g2, &mut grads[doc_slot]);
        }
    }
    grads
}

/// Gradient of the batch loss with respect to the towers and of the batch
/// entropy bound with respect to the marginal logits.
pub fn backward(model: &MicoModel, features: &FeatureSet, batch: &Batch, spec: &LossSpec) -> Result<Gradients> {
    let fwd = BatchForward::run(model, features, batch)?;
    let grads = Gradients {
        towers: tower_gradients(model, features, batch, &fwd, spec),
        theta: marginal_gradient(&fwd.doc_probs(), &fwd.marginal_log_probs),
    };
    if !grads.is_finite() {
        return Err(Error::Diverged("non-finite gradient".into()));
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featurizer::SparseVector;
    use crate::model::MarginalParams;

    const LN4: f64 = 1.386_294_361_119_890_6;

    fn uniform(k: usize) -> Vec<f64> {
        vec![1.0 / k as f64; k]
    }

    fn logs(v: &[f64]) -> Vec<f64> {
        v.iter().map(|x| x.ln()).collect()
    }

    #[test]
    fn cross_entropy_of_uniforms_is_ln_k() {
        let h = mean_cross_entropy(&[uniform(4)], &[logs(&uniform(4))]);
        assert!((h - LN4).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_one_hot_limit_is_zero() {
        let h = mean_cross_entropy(&[vec![1.0, 0.0]], &[vec![0.0, -800.0]]);
        assert_eq!(h, 0.0);
    }

    #[test]
    fn cross_entropy_hand_value() {
        // -(0.5 ln 0.9 + 0.5 ln 0.1), evaluated at 25 digits.
        let h = mean_cross_entropy(&[vec![0.5, 0.5]], &[logs(&[0.9, 0.1])]);
        assert!((h - 1.203_972_804_325_936).abs() < 1e-12);
    }

    #[test]
    fn entropy_bound_values() {
        let h = entropy_bound(&[uniform(10)], &logs(&uniform(10)));
        assert!((h - 10f64.ln()).abs() < 1e-12);
        let skewed = vec![vec![0.7, 0.1, 0.1, 0.1], vec![0.9, 0.05, 0.0, 0.05]];
        assert!((entropy_bound(&skewed, &logs(&uniform(4))) - LN4).abs() < 1e-12);
        let h = entropy_bound(&[vec![0.8, 0.2]], &logs(&[0.5, 0.5]));
        assert!((h - std::f64::consts::LN_2).abs() < 1e-12);
        let hm = biased_batch_entropy(&[vec![0.8, 0.2]]);
        assert!((hm - 0.500_402_423_538_187_9).abs() < 1e-12);
        assert!(h >= hm);
    }

    #[test]
    fn consistency_hand_values() {
        assert!((mean_cross_entropy(&[uniform(4)], &[logs(&uniform(4))]) - LN4).abs() < 1e-12);
        assert_eq!(mean_cross_entropy(&[], &[]), 0.0);
        let h = mean_cross_entropy(&[vec![0.5, 0.5]], &[logs(&[0.9, 0.1])]);
        assert!((h - 1.203_972_804_325_936).abs() < 1e-12);
    }

    fn zero_model(dim: usize, k: usize) -> MicoModel {
        MicoModel::from_parts(
            vec![TowerParams::zeros(dim, 3, k), TowerParams::zeros(dim, 3, k)],
            MarginalParams {
                logits: vec![0.0; k],
            },
        )
        .unwrap()
    }

    fn tiny_features(dim: usize, n: usize) -> FeatureSet {
        let vectors: Vec<SparseVector> = (0..n)
            .map(|i| SparseVector::new(vec![(i % dim, 1.0)]).unwrap())
            .collect();
        FeatureSet {
            queries: vectors.clone(),
            docs: vectors,
            query_dim: dim,
            doc_dim: dim,
        }
    }

    #[test]
    fn uniform_model_total_is_one_minus_beta_ln_k() {
        let model = zero_model(4, 4);
        let features = tiny_features(4, 4);
        let batch = Batch {
            pairs: vec![(0, 1), (2, 3)],
            consistency: vec![(1, 2)],
        };
        let spec = LossSpec {
            variant: Variant::Mico,
            beta: 10.0,
            gamma: 0.0,
        };
        let out = mico_loss(&model, &features, &batch, &spec).unwrap();
        assert!((out.total - (1.0 - 10.0) * LN4).abs() < 1e-12);
        let q = mico_loss(
            &model,
            &features,
            &batch,
            &LossSpec {
                variant: Variant::MicoQ,
                ..spec
            },
        )
        .unwrap();
        assert!((q.total - out.total).abs() < 1e-12, "gamma = 0 reduces to the plain loss");
        assert!((q.h_q - LN4).abs() < 1e-12);
    }

    #[test]
    fn beta_scales_only_the_bound() {
        let model = MicoModel::init(5, 5, 3, false, 3).unwrap();
        let features = tiny_features(5, 5);
        let batch = Batch {
            pairs: vec![(0, 1), (2, 3), (4, 0)],
            consistency: vec![],
        };
        let at = |beta| {
            mico_loss(
                &model,
                &features,
                &batch,
                &LossSpec {
                    variant: Variant::Mico,
                    beta,
                    gamma: 0.0,
                },
            )
            .unwrap()
        };
        let (a, b) = (at(1.0), at(2.5));
        assert!(((b.total - a.total) / 1.5 + a.h_plus).abs() < 1e-12);
        let zero = at(0.0);
        assert_eq!(zero.total, zero.h_cross);
    }

    #[test]
    fn uniform_model_theta_gradient_vanishes() {
        let model = zero_model(4, 3);
        let features = tiny_features(4, 4);
        let batch = Batch {
            pairs: vec![(0, 1), (2, 3)],
            consistency: vec![],
        };
        let spec = LossSpec {
            variant: Variant::Mico,
            beta: 10.0,
            gamma: 0.0,
        };
        let g = backward(&model, &features, &batch, &spec).unwrap();
        assert!(g.theta.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn duplicated_batch_has_same_gradient() {
        let model = MicoModel::init(6, 6, 3, false, 5).unwrap();
        let features = tiny_features(6, 6);
        let pairs = vec![(0, 1), (2, 3), (4, 5)];
        let once = Batch {
            pairs: pairs.clone(),
            consistency: vec![(1, 3)],
        };
        let twice = Batch {
            pairs: pairs.iter().chain(&pairs).copied().collect(),
            consistency: vec![(1, 3), (1, 3)],
        };
        let spec = LossSpec {
            variant: Variant::MicoQ,
            beta: 3.0,
            gamma: 3.0,
        };
        let a = backward(&model, &features, &once, &spec).unwrap();
        let b = backward(&model, &features, &twice, &spec).unwrap();
        for (x, y) in a.towers.iter().zip(&b.towers) {
            for (bx, by) in x.blocks().iter().zip(y.blocks()) {
                for (u, v) in bx.iter().zip(by) {
                    assert!((u - v).abs() < 1e-14);
                }
            }
        }
        for (u, v) in a.theta.iter().zip(&b.theta) {
            assert!((u - v).abs() < 1e-15);
        }
    }
}
