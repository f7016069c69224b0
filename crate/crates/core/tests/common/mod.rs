#![allow(dead_code)]

use rand::Rng;
use selsearch_core::corpus::{generate_synthetic, Corpus, SyntheticSpec};
use selsearch_core::featurizer::{FeatureSet, FeaturizerConfig, SparseVector, Vocabularies};
use selsearch_core::model::{MicoModel, TowerParams};
use selsearch_core::trainer::{mico_loss, Batch, BatchForward, LossSpec, Variant};

pub const FD_EPS: f64 = 1e-4;
/// Denominator floor for relative errors of near-zero derivatives.
pub const FD_FLOOR: f64 = 1e-3;

pub fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_sparse<R: Rng>(rng: &mut R, dim: usize) -> SparseVector {
    let mut entries = Vec::new();
    for i in 0..dim {
        if rng.gen_bool(0.5) {
            entries.push((i, rng.gen_range(-1.5..1.5)));
        }
    }
    SparseVector::new(entries).unwrap()
}

/// A randomized gradient-check instance.
pub struct FdInstance {
    pub model: MicoModel,
    pub features: FeatureSet,
    pub batch: Batch,
    pub spec: LossSpec,
}

pub fn fd_instance(seed: u64) -> FdInstance {
    let mut r = rng(seed);
    let k = r.gen_range(2..=5);
    let query_dim = r.gen_range(1..=10);
    let share = r.gen_bool(0.25);
    let doc_dim = if share { query_dim } else { r.gen_range(1..=10) };
    let hidden = r.gen_range(2..=6);
    let mut model = MicoModel::init_with_hidden(query_dim, doc_dim, hidden, k, share, seed).unwrap();
    for tower in model.towers_mut() {
        for b in tower.hidden.bias.iter_mut().chain(tower.output.bias.iter_mut()) {
            *b = r.gen_range(-0.5..0.5);
        }
    }
    for t in model.marginal.logits.iter_mut() {
        *t = r.gen_range(-1.0..1.0);
    }
    let n_q = r.gen_range(1..=8);
    let n_d = r.gen_range(2..=8);
    let features = FeatureSet {
        queries: (0..n_q).map(|_| random_sparse(&mut r, query_dim)).collect(),
        docs: (0..n_d).map(|_| random_sparse(&mut r, doc_dim)).collect(),
        query_dim,
        doc_dim,
    };
    let b = r.gen_range(1..=8);
    let pairs = (0..b).map(|_| (r.gen_range(0..n_q), r.gen_range(0..n_d))).collect();
    let variant = if r.gen_bool(0.5) { Variant::Mico } else { Variant::MicoQ };
    let consistency = if variant == Variant::MicoQ {
        (0..r.gen_range(0..=4))
            .map(|_| {
                let a = r.gen_range(0..n_d);
                let mut c = r.gen_range(0..n_d - 1);
                if c >= a {
                    c += 1;
                }
                (a, c)
            })
            .collect()
    } else {
        Vec::new()
    };
    FdInstance {
        model,
        features,
        batch: Batch { pairs, consistency },
        spec: LossSpec {
            variant,
            beta: r.gen_range(0.0..10.0),
            gamma: r.gen_range(0.0..5.0),
        },
    }
}

/// Smallest ReLU pre-activation margin relative to the largest change a
/// single perturbation can cause.
fn kink_margin(inst: &FdInstance) -> f64 {
    let fwd = BatchForward::run(&inst.model, &inst.features, &inst.batch).unwrap();
    let traces = fwd
        .queries
        .iter()
        .chain(&fwd.docs)
        .chain(fwd.consistency.iter().flat_map(|(a, b)| [a, b]));
    let min_pre = traces
        .flat_map(|t| t.hidden_pre.iter().map(|h| h.abs()))
        .fold(f64::INFINITY, f64::min);
    let max_x = inst
        .features
        .queries
        .iter()
        .chain(&inst.features.docs)
        .flat_map(|x| x.entries().iter().map(|e| e.1.abs()))
        .fold(1.0, f64::max);
    min_pre / (FD_EPS * max_x)
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

/// Largest relative error over every tower parameter (against the total
/// loss) and every marginal logit (against the entropy bound). `None` when
/// the instance sits too close to a ReLU kink for central differences.
pub fn fd_max_error(inst: &mut FdInstance) -> Option<(f64, usize)> {
    if kink_margin(inst) < 4.0 {
        return None;
    }
    let grads = selsearch_core::model::backward(&inst.model, &inst.features, &inst.batch, &inst.spec).unwrap();
    let mut worst = 0.0f64;
    let mut checked = 0;

    let n_towers = inst.model.towers().len();
    for t in 0..n_towers {
        let analytic: Vec<Vec<f64>> = grads.towers[t].blocks().iter().map(|b| b.to_vec()).collect();
        for (bi, block) in analytic.iter().enumerate() {
            for (i, &a) in block.iter().enumerate() {
                let eval = |model: &mut MicoModel, delta: f64| {
                    let tower: &mut TowerParams = &mut model.towers_mut()[t];
                    tower.blocks_mut()[bi][i] += delta;
                    let v = mico_loss(model, &inst.features, &inst.batch, &inst.spec).unwrap().total;
                    model.towers_mut()[t].blocks_mut()[bi][i] -= delta;
                    v
                };
                let plus = eval(&mut inst.model, FD_EPS);
                let minus = eval(&mut inst.model, -FD_EPS);
                worst = worst.max(rel_err(a, (plus - minus) / (2.0 * FD_EPS)));
                checked += 1;
            }
        }
    }
    for (i, &a) in grads.theta.iter().enumerate() {
        let mut eval = |delta: f64| {
            inst.model.marginal.logits[i] += delta;
            let v = mico_loss(&inst.model, &inst.features, &inst.batch, &inst.spec).unwrap().h_plus;
            inst.model.marginal.logits[i] -= delta;
            v
        };
        let plus = eval(FD_EPS);
        let minus = eval(-FD_EPS);
        worst = worst.max(rel_err(a, (plus - minus) / (2.0 * FD_EPS)));
        checked += 1;
    }
    Some((worst, checked))
}

/// The planted corpus: 4 groups of 500 documents, 200 queries per group,
/// 5% routing noise.
pub fn planted() -> (Corpus, FeatureSet) {
    featurized(&SyntheticSpec {
        noise_rate: 0.05,
        ..SyntheticSpec::default()
    })
}

pub fn featurized(spec: &SyntheticSpec) -> (Corpus, FeatureSet) {
    let synth = generate_synthetic(spec).unwrap();
    let fc = FeaturizerConfig::default();
    let vocabs = Vocabularies::build(&synth.corpus, &fc).unwrap();
    let features = FeatureSet::compute(&synth.corpus, &vocabs, &fc);
    (synth.corpus, features)
}
