//! Minimax training of the towers against the variational marginal.
//!
//! Each step first moves the marginal logits down the batch entropy bound
//! (tightening it toward the batch shard marginal), then moves both towers
//! down the batch loss with the updated marginal. Epochs end with a dev-set
//! top-1 coverage check used for model selection and early stopping.

pub mod adam;
pub mod objective;

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::{IteratorRandom, SliceRandom};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{training_pairs, Corpus, GradeFilter, Split};
use crate::error::{Error, Result};
use crate::evaluation;
use crate::featurizer::FeatureSet;
use crate::model::MicoModel;
use crate::selective_search::{assign_documents, route_queries};
use crate::util;

pub use adam::{clip_global_norm, Adam};
pub use objective::{
    backward, cross_entropy_term, entropy_plus_term, mico_loss, query_consistency_term, Batch,
    BatchForward, Gradients, LossBreakdown, LossSpec, Variant,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub variant: Variant,
    pub n_clusters: usize,
    pub share_towers: bool,
    pub beta: f64,
    pub gamma: f64,
    pub batch_size: usize,
    pub lr_towers: f64,
    pub lr_theta: f64,
    /// Global L2 clip on the tower gradient; infinity disables clipping.
    pub clip_norm: f64,
    pub theta_steps: usize,
    pub max_epochs: usize,
    /// Dev evaluations without improvement before stopping.
    pub patience: usize,
    /// Return the best-dev parameters rather than the last epoch's.
    pub keep_best: bool,
    pub seed: u64,
    /// Ascend rather than descend the entropy bound in the marginal step.
    pub maximize_theta: bool,
    /// Grades used as training pairs; empty means all.
    pub train_grades: Vec<String>,
    /// Grades counted as relevant for dev coverage; empty means all.
    pub eval_grades: Vec<String>,
}

impl TrainConfig {
    /// Defaults for each variant: `beta = 10`, clip 10, one marginal step
    /// for the plain loss; `beta = 3`, `gamma = 3`, clip 1, four marginal
    /// steps with query consistency.
    pub fn for_variant(variant: Variant, n_clusters: usize) -> Self {
        let base = TrainConfig {
            variant,
            n_clusters,
            share_towers: false,
            beta: 10.0,
            gamma: 0.0,
            batch_size: 256,
            lr_towers: 0.03,
            lr_theta: 0.1,
            clip_norm: 10.0,
            theta_steps: 1,
            max_epochs: 50,
            patience: 5,
            keep_best: true,
            seed: 0,
            maximize_theta: false,
            train_grades: Vec::new(),
            eval_grades: Vec::new(),
        };
        match variant {
            Variant::Mico => base,
            Variant::MicoQ => TrainConfig {
                beta: 3.0,
                gamma: 3.0,
                clip_norm: 1.0,
                theta_steps: 4,
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidArgument(m));
        if self.n_clusters < 2 {
            return fail(format!("need at least 2 clusters, got {}", self.n_clusters));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return fail(format!("beta must be a finite nonnegative number, got {}", self.beta));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return fail(format!("gamma must be a finite nonnegative number, got {}", self.gamma));
        }
        if self.batch_size < 2 {
            return fail(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if !(self.lr_towers > 0.0 && self.lr_theta > 0.0) {
            return fail("learning rates must be positive".into());
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return fail(format!("clip_norm must be positive, got {}", self.clip_norm));
        }
        if self.theta_steps == 0 {
            return fail("theta_steps must be at least 1".into());
        }
        Ok(())
    }

    pub fn loss_spec(&self) -> LossSpec {
        LossSpec {
            variant: self.variant,
            beta: self.beta,
            gamma: self.gamma,
        }
    }

    /// Stable fingerprint recorded in checkpoints.
    pub fn hash(&self) -> String {
        util::short_hash(&serde_json::to_string(self).expect("config serializes"))
    }
}

/// Adam state for the towers and the marginal.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub towers: Adam,
    pub theta: Adam,
}

impl OptimizerState {
    pub fn new(config: &TrainConfig) -> Self {
        OptimizerState {
            towers: Adam::new(config.lr_towers),
            theta: Adam::new(config.lr_theta),
        }
    }
}

/// One minimax step: `theta_steps` Adam updates of the marginal on the
/// batch entropy bound, then one clipped Adam update of the towers on the
/// batch loss. Returns the loss breakdown the tower update descended.
pub fn train_step(
    model: &mut MicoModel,
    features: &FeatureSet,
    batch: &Batch,
    config: &TrainConfig,
    state: &mut OptimizerState,
) -> Result<LossBreakdown> {
    let mut fwd = BatchForward::run(model, features, batch)?;
    let doc_probs = fwd.doc_probs();
    let sign = if config.maximize_theta { -1.0 } else { 1.0 };
    for _ in 0..config.theta_steps {
        let grad: Vec<f64> = objective::marginal_gradient(&doc_probs, &model.marginal.log_probs())
            .into_iter()
            .map(|g| sign * g)
            .collect();
        state.theta.step(&mut [&mut model.marginal.logits], &[&grad]);
    }
    if !model.marginal.logits.iter().all(|v| v.is_finite()) {
        return Err(Error::Diverged("marginal logits became non-finite".into()));
    }
    fwd.marginal_log_probs = model.marginal.log_probs();

    let spec = config.loss_spec();
    let breakdown = fwd.breakdown(&spec);
    if !breakdown.is_finite() {
        return Err(Error::Diverged(format!("non-finite loss {breakdown:?}")));
    }
    let mut grads = objective::tower_gradients(model, features, batch, &fwd, &spec);
    {
        let mut blocks: Vec<&mut [f64]> = grads.iter_mut().flat_map(|t| t.blocks_mut()).collect();
        let norm = clip_global_norm(&mut blocks, config.clip_norm);
        if !norm.is_finite() {
            return Err(Error::Diverged(format!("tower gradient norm {norm}")));
        }
    }
    let grad_blocks: Vec<&[f64]> = grads.iter().flat_map(|t| t.blocks()).collect();
    let mut params: Vec<&mut [f64]> = model
        .towers_mut()
        .iter_mut()
        .flat_map(|t| t.blocks_mut())
        .collect();
    state.towers.step(&mut params, &grad_blocks);
    Ok(breakdown)
}

/// Distinct relevant documents per query among the training pairs.
pub fn relevant_by_query(pairs: &[(usize, usize)]) -> HashMap<usize, Vec<usize>> {
    let mut map: HashMap<usize, Vec<usize>> = HashMap::new();
    for &(q, d) in pairs {
        map.entry(q).or_default().push(d);
    }
    for docs in map.values_mut() {
        docs.sort_unstable();
        docs.dedup();
    }
    map
}

/// Shuffles the pairs and cuts them into batches. For the consistency
/// variant, every query in a batch with at least two relevant documents
/// contributes one pair of distinct documents drawn from its full relevant set.
pub fn sample_epoch(
    pairs: &[(usize, usize)],
    relevant: &HashMap<usize, Vec<usize>>,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<Batch> {
    let mut order = pairs.to_vec();
    order.shuffle(rng);
    order
        .chunks(config.batch_size)
        .map(|chunk| {
            let mut consistency = Vec::new();
            if config.variant == Variant::MicoQ {
                let mut seen = std::collections::HashSet::new();
                for &(q, _) in chunk {
                    if !seen.insert(q) {
                        continue;
                    }
                    if let Some(docs) = relevant.get(&q).filter(|d| d.len() >= 2) {
                        let mut picked = docs.iter().copied().choose_multiple(rng, 2);
                        picked.shuffle(rng);
                        consistency.push((picked[0], picked[1]));
                    }
                }
            }
            Batch {
                pairs: chunk.to_vec(),
                consistency,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_h_cross: f64,
    pub mean_h_plus: f64,
    pub mean_h_q: f64,
    pub mean_total: f64,
    pub dev_cov1: Option<f64>,
    /// Fraction of the collection searched at top-1 on the dev queries.
    pub dev_cost1: Option<f64>,
    pub wallclock_s: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept (0 means the initialization).
    pub best_epoch: usize,
}

impl TrainingLog {
    /// One JSON object per epoch.
    pub fn save_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = Vec::new();
        for record in &self.epochs {
            serde_json::to_writer(&mut out, record)?;
            out.push(b'\n');
        }
        fs::File::create(path)
            .and_then(|mut f| f.write_all(&out))
            .map_err(|e| Error::io(path, e))
    }
}

/// Dev-set top-1 coverage and the fraction of documents it searches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DevScore {
    pub cov1: f64,
    pub cost1: f64,
}

impl DevScore {
    /// Coverage above what random routing reaches at the same cost. A
    /// collapsed sharding scores 0 despite perfect coverage.
    pub fn lift(&self) -> f64 {
        self.cov1 - self.cost1
    }
}

/// Top-1 coverage of `queries` under the model's own sharding; `None` when
/// no query has a relevant document.
pub fn dev_score(
    model: &MicoModel,
    corpus: &Corpus,
    features: &FeatureSet,
    queries: &[usize],
    relevant: &[Vec<usize>],
) -> Result<Option<DevScore>> {
    let shard_map = assign_documents(model, &features.docs)?;
    let routed = route_queries(model, corpus, &features.queries, queries, 1)?;
    let rankings: Vec<Vec<usize>> = routed.iter().map(|r| r.shards()).collect();
    let report = evaluation::evaluate(&shard_map, queries, &rankings, relevant, &[1], 0)?;
    Ok((report.n_queries > 0).then(|| DevScore {
        cov1: report.coverage[&1],
        cost1: report.cost_resource[&1] / shard_map.n_docs().max(1) as f64,
    }))
}

/// Trains from a fresh initialization and returns the parameters with the
/// best dev top-1 lift (the last epoch's when there is no dev split).
pub fn fit(corpus: &Corpus, features: &FeatureSet, config: &TrainConfig) -> Result<(MicoModel, TrainingLog)> {
    fit_with(corpus, features, config, |_| {})
}

/// [`fit`] with a callback invoked after every epoch.
pub fn fit_with(
    corpus: &Corpus,
    features: &FeatureSet,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(MicoModel, TrainingLog)> {
    config.validate()?;
    let pairs = training_pairs(corpus, &GradeFilter::from_labels(&config.train_grades))?;
    let relevant = relevant_by_query(&pairs);
    let dev_queries = corpus.queries_in(Split::Dev);
    let dev_relevant = corpus.relevant_docs(&GradeFilter::from_labels(&config.eval_grades));

    let mut model = MicoModel::init(
        features.query_dim,
        features.doc_dim,
        config.n_clusters,
        config.share_towers,
        config.seed,
    )?;
    let mut state = OptimizerState::new(config);
    let mut rng = util::sub_rng(config.seed, 1);
    let start = Instant::now();

    let mut log = TrainingLog::default();
    let mut best: Option<(f64, MicoModel)> = None;
    let mut stale = 0;
    for epoch in 1..=config.max_epochs {
        let batches = sample_epoch(&pairs, &relevant, config, &mut rng);
        let mut sums = LossBreakdown::default();
        for batch in &batches {
            let b = train_step(&mut model, features, batch, config, &mut state)?;
            sums.h_cross += b.h_cross;
            sums.h_plus += b.h_plus;
            sums.h_q += b.h_q;
            sums.total += b.total;
        }
        let n = batches.len() as f64;
        let dev = dev_score(&model, corpus, features, &dev_queries, &dev_relevant)?;
        let record = EpochRecord {
            epoch,
            mean_h_cross: sums.h_cross / n,
            mean_h_plus: sums.h_plus / n,
            mean_h_q: sums.h_q / n,
            mean_total: sums.total / n,
            dev_cov1: dev.map(|d| d.cov1),
            dev_cost1: dev.map(|d| d.cost1),
            wallclock_s: start.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        log.epochs.push(record);

        match dev.map(|d| d.lift()) {
            Some(lift) if best.as_ref().is_none_or(|(b, _)| lift > *b) => {
                best = Some((lift, model.clone()));
                log.best_epoch = epoch;
                stale = 0;
            }
            Some(_) => {
                stale += 1;
                if stale >= config.patience {
                    break;
                }
            }
            None => log.best_epoch = epoch,
        }
    }
    if !config.keep_best {
        log.best_epoch = log.epochs.len();
    }
    let model = match best {
        Some((_, m)) if config.keep_best => m,
        _ => model,
    };
    Ok((model, log))
}

/// Means of the loss terms over all batches of one epoch, weighting each
/// batch by its size, with frozen parameters.
pub fn epoch_mean_loss(
    model: &MicoModel,
    features: &FeatureSet,
    batches: &[Batch],
    spec: &LossSpec,
) -> Result<LossBreakdown> {
    let mut acc = LossBreakdown::default();
    let mut total = 0.0;
    for batch in batches {
        let b = mico_loss(model, features, batch, spec)?;
        let w = batch.pairs.len() as f64;
        acc.h_cross += w * b.h_cross;
        acc.h_plus += w * b.h_plus;
        acc.h_q += w * b.h_q;
        acc.total += w * b.total;
        total += w;
    }
    Ok(LossBreakdown {
        h_cross: acc.h_cross / total,
        h_plus: acc.h_plus / total,
        h_q: acc.h_q / total,
        total: acc.total / total,
    })
}
