//! Query tower, document tower and variational shard marginal.
//!
//! Each tower is a one-hidden-layer ReLU network over a sparse input,
//! followed by a softmax over `K` shards. The marginal is a bare softmax over
//! `K` free logits. With `share_towers` the query and document towers are a
//! single parameter block.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::featurizer::SparseVector;
use crate::util;

pub use crate::trainer::objective::{backward, Gradients};

/// Width of the hidden layer of both towers.
pub const HIDDEN_DIM: usize = 20;

/// `weights` is row-major `[in_dim x out_dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayerParams {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DenseLayerParams {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        DenseLayerParams {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weights = (0..in_dim * out_dim)
            .map(|_| rng.gen_range(-limit..=limit))
            .collect();
        DenseLayerParams {
            in_dim,
            out_dim,
            weights,
            bias: vec![0.0; out_dim],
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.weights[i * self.out_dim..(i + 1) * self.out_dim]
    }
}

/// Intermediate values of one tower evaluation, kept for backprop.
#[derive(Debug, Clone)]
pub struct TowerTrace {
    pub hidden_pre: Vec<f64>,
    pub hidden: Vec<f64>,
    pub log_probs: Vec<f64>,
}

impl TowerTrace {
    pub fn probs(&self) -> Vec<f64> {
        self.log_probs.iter().map(|l| l.exp()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TowerParams {
    pub hidden: DenseLayerParams,
    pub output: DenseLayerParams,
}

impl TowerParams {
    pub fn glorot<R: Rng>(in_dim: usize, hidden: usize, k: usize, rng: &mut R) -> Self {
        TowerParams {
            hidden: DenseLayerParams::glorot(in_dim, hidden, rng),
            output: DenseLayerParams::glorot(hidden, k, rng),
        }
    }

    pub fn zeros(in_dim: usize, hidden: usize, k: usize) -> Self {
        TowerParams {
            hidden: DenseLayerParams::zeros(in_dim, hidden),
            output: DenseLayerParams::zeros(hidden, k),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.in_dim(), self.hidden_dim(), self.n_clusters())
    }

    pub fn in_dim(&self) -> usize {
        self.hidden.in_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden.out_dim
    }

    pub fn n_clusters(&self) -> usize {
        self.output.out_dim
    }

    fn check_input(&self, x: &SparseVector) -> Result<()> {
        match x.max_index() {
            Some(i) if i >= self.in_dim() => Err(Error::IndexOutOfRange {
                index: i,
                dim: self.in_dim(),
            }),
            _ => Ok(()),
        }
    }

    /// Evaluates the tower and keeps the activations.
    pub fn trace(&self, x: &SparseVector) -> Result<TowerTrace> {
        self.check_input(x)?;
        let mut hidden_pre = self.hidden.bias.clone();
        for &(i, w) in x.entries() {
            for (h, &v) in hidden_pre.iter_mut().zip(self.hidden.row(i)) {
                *h += w * v;
            }
        }
        let hidden: Vec<f64> = hidden_pre.iter().map(|&h| h.max(0.0)).collect();
        let mut logits = self.output.bias.clone();
        for (j, &h) in hidden.iter().enumerate() {
            if h != 0.0 {
                for (l, &v) in logits.iter_mut().zip(self.output.row(j)) {
                    *l += h * v;
                }
            }
        }
        Ok(TowerTrace {
            hidden_pre,
            hidden,
            log_probs: util::log_softmax(&logits),
        })
    }

    pub fn forward(&self, x: &SparseVector) -> Result<ClusterDistribution> {
        Ok(ClusterDistribution::from_log_probs(&self.trace(x)?.log_probs))
    }

    /// Accumulates into `grad` the parameter gradient given the gradient of
    /// the loss with respect to this evaluation's output logits.
    pub fn backprop(&self, x: &SparseVector, trace: &TowerTrace, dlogits: &[f64], grad: &mut TowerParams) {
        let k = self.n_clusters();
        let mut dhidden = vec![0.0; self.hidden_dim()];
        for (j, &h) in trace.hidden.iter().enumerate() {
            let row = &self.output.weights[j * k..(j + 1) * k];
            let grow = &mut grad.output.weights[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for c in 0..k {
                grow[c] += h * dlogits[c];
                acc += row[c] * dlogits[c];
            }
            dhidden[j] = if trace.hidden_pre[j] > 0.0 { acc } else { 0.0 };
        }
        for (b, &d) in grad.output.bias.iter_mut().zip(dlogits) {
            *b += d;
        }
        let width = self.hidden_dim();
        for &(i, w) in x.entries() {
            let grow = &mut grad.hidden.weights[i * width..(i + 1) * width];
            for (g, &d) in grow.iter_mut().zip(&dhidden) {
                *g += w * d;
            }
        }
        for (b, &d) in grad.hidden.bias.iter_mut().zip(&dhidden) {
            *b += d;
        }
    }

    /// Parameter blocks in checkpoint order: hidden W, hidden b, output W, output b.
    pub fn blocks(&self) -> [&[f64]; 4] {
        [
            &self.hidden.weights,
            &self.hidden.bias,
            &self.output.weights,
            &self.output.bias,
        ]
    }

    pub fn blocks_mut(&mut self) -> [&mut [f64]; 4] {
        [
            &mut self.hidden.weights,
            &mut self.hidden.bias,
            &mut self.output.weights,
            &mut self.output.bias,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarginalParams {
    pub logits: Vec<f64>,
}

impl MarginalParams {
    pub fn log_probs(&self) -> Vec<f64> {
        util::log_softmax(&self.logits)
    }

    pub fn forward(&self) -> ClusterDistribution {
        forward_marginal(self)
    }
}

/// A probability vector over shards.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterDistribution {
    probs: Vec<f64>,
}

impl ClusterDistribution {
    pub fn from_logits(logits: &[f64]) -> Self {
        Self::from_log_probs(&util::log_softmax(logits))
    }

    pub fn from_log_probs(log_probs: &[f64]) -> Self {
        ClusterDistribution {
            probs: log_probs.iter().map(|l| l.exp()).collect(),
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Index of the largest probability; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

pub fn forward_tower(tower: &TowerParams, x: &SparseVector) -> Result<ClusterDistribution> {
    tower.forward(x)
}

pub fn forward_marginal(marginal: &MarginalParams) -> ClusterDistribution {
    ClusterDistribution::from_logits(&marginal.logits)
}

/// Query tower, document tower and marginal over `n_clusters` shards.
#[derive(Debug, Clone, PartialEq)]
pub struct MicoModel {
    /// One block when towers are shared, otherwise `[query, doc]`.
    towers: Vec<TowerParams>,
    pub marginal: MarginalParams,
    n_clusters: usize,
}

impl MicoModel {
    /// Glorot-initialized towers with a 20-unit hidden layer, zero biases and
    /// zero marginal logits.
    pub fn init(query_dim: usize, doc_dim: usize, k: usize, share_towers: bool, seed: u64) -> Result<Self> {
        Self::init_with_hidden(query_dim, doc_dim, HIDDEN_DIM, k, share_towers, seed)
    }

    pub fn init_with_hidden(
        query_dim: usize,
        doc_dim: usize,
        hidden: usize,
        k: usize,
        share_towers: bool,
        seed: u64,
    ) -> Result<Self> {
        if query_dim == 0 || doc_dim == 0 || hidden == 0 {
            return Err(Error::InvalidArgument("model dimensions must be at least 1".into()));
        }
        if k < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 clusters, got {k}")));
        }
        if share_towers && query_dim != doc_dim {
            return Err(Error::InvalidArgument(format!(
                "shared towers need equal query and document dimensions ({query_dim} != {doc_dim})"
            )));
        }
        let mut rng = util::rng(seed);
        let mut towers = vec![TowerParams::glorot(query_dim, hidden, k, &mut rng)];
        if !share_towers {
            towers.push(TowerParams::glorot(doc_dim, hidden, k, &mut rng));
        }
        Ok(MicoModel {
            towers,
            marginal: MarginalParams {
                logits: vec![0.0; k],
            },
            n_clusters: k,
        })
    }

    pub fn from_parts(towers: Vec<TowerParams>, marginal: MarginalParams) -> Result<Self> {
        let k = marginal.logits.len();
        if towers.is_empty() || towers.len() > 2 {
            return Err(Error::InvalidArgument("expected one or two towers".into()));
        }
        if k < 2 || towers.iter().any(|t| t.n_clusters() != k) {
            return Err(Error::InvalidArgument("inconsistent cluster counts".into()));
        }
        Ok(MicoModel {
            towers,
            marginal,
            n_clusters: k,
        })
    }

    pub fn n_clusters(&self) -> usize {
        self.n_clusters
    }

    pub fn share_towers(&self) -> bool {
        self.towers.len() == 1
    }

    pub fn towers(&self) -> &[TowerParams] {
        &self.towers
    }

    pub fn towers_mut(&mut self) -> &mut [TowerParams] {
        &mut self.towers
    }

    pub fn query_tower(&self) -> &TowerParams {
        &self.towers[0]
    }

    pub fn doc_tower(&self) -> &TowerParams {
        &self.towers[self.towers.len() - 1]
    }

    /// Position of the document tower within [`Self::towers`].
    pub fn doc_tower_slot(&self) -> usize {
        self.towers.len() - 1
    }

    pub fn query_dim(&self) -> usize {
        self.query_tower().in_dim()
    }

    pub fn doc_dim(&self) -> usize {
        self.doc_tower().in_dim()
    }

    pub fn hidden_dim(&self) -> usize {
        self.query_tower().hidden_dim()
    }

    /// All parameters in checkpoint order.
    pub fn blocks(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = self.towers.iter().flat_map(|t| t.blocks()).collect();
        out.push(&self.marginal.logits);
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = self
            .towers
            .iter_mut()
            .flat_map(|t| t.blocks_mut())
            .collect();
        out.push(&mut self.marginal.logits);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.iter().all(|v| v.is_finite()))
    }
}

pub fn init_model(query_dim: usize, doc_dim: usize, k: usize, share_towers: bool, seed: u64) -> Result<MicoModel> {
    MicoModel::init(query_dim, doc_dim, k, share_towers, seed)
}

const MAGIC: &[u8; 8] = b"SELSRCH\0";
const VERSION: u32 = 1;
const HASH_LEN: usize = 16;

/// Writes a checkpoint: magic, version, K, query dim, doc dim, hidden dim,
/// share flag, 16-byte config hash, then every parameter block as
/// little-endian `f32`.
pub fn save_checkpoint(model: &MicoModel, path: impl AsRef<Path>, config_hash: &str) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    for v in [
        VERSION,
        model.n_clusters() as u32,
        model.query_dim() as u32,
        model.doc_dim() as u32,
        model.hidden_dim() as u32,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.push(model.share_towers() as u8);
    let mut hash = [b'0'; HASH_LEN];
    for (dst, src) in hash.iter_mut().zip(config_hash.bytes()) {
        *dst = src;
    }
    buf.extend_from_slice(&hash);
    for block in model.blocks() {
        for &v in block {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let io = |e| Error::io(path, e);
    let mut out = BufWriter::new(fs::File::create(path).map_err(io)?);
    out.write_all(&buf).map_err(io)?;
    out.flush().map_err(io)
}

/// Reads a checkpoint written by [`save_checkpoint`]; returns the model and
/// its recorded config hash.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(MicoModel, String)> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut cursor = Cursor { bytes: &bytes, pos: 0 };
    if cursor.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = cursor.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let k = cursor.u32()? as usize;
    let query_dim = cursor.u32()? as usize;
    let doc_dim = cursor.u32()? as usize;
    let hidden = cursor.u32()? as usize;
    let share = match cursor.take(1)?[0] {
        0 => false,
        1 => true,
        other => return Err(Error::Checkpoint(format!("bad share flag {other}"))),
    };
    let hash = String::from_utf8_lossy(cursor.take(HASH_LEN)?).into_owned();

    let mut model = MicoModel::init_with_hidden(query_dim, doc_dim, hidden, k, share, 0)?;
    for block in model.blocks_mut() {
        for v in block.iter_mut() {
            *v = f32::from_le_bytes(cursor.take(4)?.try_into().expect("4 bytes")) as f64;
        }
    }
    if cursor.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok((model, hash))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sv(entries: &[(usize, f64)]) -> SparseVector {
        SparseVector::new(entries.to_vec()).unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let a = MicoModel::init(30, 40, 4, false, 9).unwrap();
        let b = MicoModel::init(30, 40, 4, false, 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, MicoModel::init(30, 40, 4, false, 10).unwrap());
    }

    #[test]
    fn init_marginal_is_uniform() {
        let m = MicoModel::init(3, 3, 5, false, 0).unwrap();
        for &p in m.marginal.forward().probs() {
            assert!((p - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn init_rejects_bad_shapes() {
        assert!(MicoModel::init(3, 4, 4, true, 0).is_err());
        assert!(MicoModel::init(3, 3, 1, false, 0).is_err());
        assert!(MicoModel::init(0, 3, 2, false, 0).is_err());
    }

    #[test]
    fn glorot_bounds_hold() {
        let m = MicoModel::init(50, 50, 8, false, 1).unwrap();
        let limit = (6.0f64 / 70.0).sqrt();
        assert!(m.query_tower().hidden.weights.iter().all(|w| w.abs() <= limit));
        assert!(m.query_tower().hidden.bias.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn zero_parameters_give_uniform() {
        let tower = TowerParams::zeros(5, 3, 4);
        let out = tower.forward(&sv(&[(1, 0.5), (4, 0.5)])).unwrap();
        assert!(out.probs().iter().all(|&p| (p - 0.25).abs() < 1e-15));
    }

    #[test]
    #[allow(clippy::excessive_precision)]
    fn handcrafted_single_unit_tower() {
        // x = {0: 2.0}; hidden = relu(0.5 * 2 + 0) = 1; logits = (1.0, 2.0, 0.0) * 1 + (0, 0, 1)
        // -> logits (1, 2, 1); softmax = (e, e^2, e) / (2e + e^2).
        let tower = TowerParams {
            hidden: DenseLayerParams {
                in_dim: 1,
                out_dim: 1,
                weights: vec![0.5],
                bias: vec![0.0],
            },
            output: DenseLayerParams {
                in_dim: 1,
                out_dim: 3,
                weights: vec![1.0, 2.0, 0.0],
                bias: vec![0.0, 0.0, 1.0],
            },
        };
        let out = tower.forward(&sv(&[(0, 2.0)])).unwrap();
        // 1/(2 + e) and e/(2 + e), evaluated independently to 20 digits.
        let low = 0.211_941_557_617_085_445;
        let high = 0.576_116_884_765_829_110;
        let expected = [low, high, low];
        for (p, e) in out.probs().iter().zip(expected) {
            assert!((p - e).abs() < 1e-15, "{p} vs {e}");
        }
    }

    #[test]
    fn out_of_range_index_is_an_error() {
        let tower = TowerParams::zeros(3, 2, 2);
        assert!(matches!(
            tower.forward(&sv(&[(3, 1.0)])),
            Err(Error::IndexOutOfRange { index: 3, dim: 3 })
        ));
    }

    #[test]
    fn empty_input_uses_biases_only() {
        let mut tower = TowerParams::zeros(3, 2, 2);
        tower.output.bias = vec![0.0, 1.0];
        let out = tower.forward(&SparseVector::default()).unwrap();
        let e = std::f64::consts::E;
        assert!((out.probs()[1] - e / (1.0 + e)).abs() < 1e-15);
    }

    #[test]
    fn marginal_softmax_limits_and_shift() {
        let mut last = 0.0;
        for t in [0.0, 1.0, 5.0, 20.0, 100.0] {
            let p = forward_marginal(&MarginalParams {
                logits: vec![t, 0.0, 0.0],
            });
            assert!(p.probs()[0] >= last);
            last = p.probs()[0];
        }
        assert!(last >= 1.0 - 1e-15);
        let a = forward_marginal(&MarginalParams {
            logits: vec![0.3, -1.0, 2.0],
        });
        let b = forward_marginal(&MarginalParams {
            logits: vec![100.3, 99.0, 102.0],
        });
        for (x, y) in a.probs().iter().zip(b.probs()) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn argmax_ties_go_low() {
        let d = ClusterDistribution {
            probs: vec![0.5, 0.5],
        };
        assert_eq!(d.argmax(), 0);
    }

    #[test]
    fn shared_towers_are_identical() {
        let m = MicoModel::init(6, 6, 3, true, 2).unwrap();
        let x = sv(&[(0, 0.3), (5, 0.9)]);
        assert_eq!(m.query_tower().forward(&x).unwrap(), m.doc_tower().forward(&x).unwrap());
        assert!(std::ptr::eq(m.query_tower(), m.doc_tower()));
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = MicoModel::init(7, 9, 3, false, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&m, &path, "0123456789abcdef").unwrap();
        let (back, hash) = load_checkpoint(&path).unwrap();
        assert_eq!(hash, "0123456789abcdef");
        for (a, b) in m.blocks().iter().zip(back.blocks()) {
            for (x, y) in a.iter().zip(b) {
                assert_eq!(*x as f32, *y as f32);
            }
        }
        let again = dir.path().join("again.ckpt");
        save_checkpoint(&back, &again, &hash).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        fs::write(&path, b"not a checkpoint").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_outputs_are_distributions(
                seed in 0u64..1000,
                entries in prop::collection::btree_map(0usize..12, 0.01f64..2.0, 0..6),
            ) {
                let m = MicoModel::init(12, 12, 5, false, seed).unwrap();
                let x = SparseVector::new(entries.into_iter().collect()).unwrap();
                for tower in m.towers() {
                    let p = tower.forward(&x).unwrap();
                    prop_assert!(p.probs().iter().all(|&v| v > 0.0 && v < 1.0));
                    prop_assert!((p.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
                    prop_assert_eq!(&p, &tower.forward(&x).unwrap());
                }
            }
        }
    }
}
