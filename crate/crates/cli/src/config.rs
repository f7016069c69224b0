//! Pipeline configuration: a TOML file, `--set path=value` overrides and
//! per-variant training defaults for anything left unset.

use std::fs;
use std::path::{Path, PathBuf};

use selsearch_core::corpus::{CorpusFormat, SyntheticSpec};
use selsearch_core::featurizer::FeaturizerConfig;
use selsearch_core::trainer::{TrainConfig, Variant};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::CliError;

pub const DEFAULT_EVAL_NS: [usize; 5] = [1, 3, 5, 10, 30];

/// Artifact locations. Relative paths resolve against `root`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub root: PathBuf,
    pub corpus: PathBuf,
    pub stopwords: Option<PathBuf>,
    pub vocab: PathBuf,
    /// Only written when the featurizer builds separate vocabularies.
    pub query_vocab: PathBuf,
    pub features: PathBuf,
    pub checkpoint: PathBuf,
    pub training_log: PathBuf,
    pub shardmap: PathBuf,
    pub routing: PathBuf,
    pub baselines: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            root: PathBuf::from("."),
            corpus: "corpus".into(),
            stopwords: None,
            vocab: "vocab.tsv".into(),
            query_vocab: "query_vocab.tsv".into(),
            features: "features".into(),
            checkpoint: "model.ckpt".into(),
            training_log: "training_log.jsonl".into(),
            shardmap: "shardmap.tsv".into(),
            routing: "routing.tsv".into(),
            baselines: "baselines".into(),
            reports: "reports".into(),
        }
    }
}

impl Paths {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: Paths,
    /// `jsonl` or `tsv`.
    pub corpus_format: String,
    pub synth: SyntheticSpec,
    pub featurizer: FeaturizerConfig,
    /// Number of shards.
    pub k: usize,
    pub train: TrainConfig,
    /// Cut-offs for coverage and cost; defaults to 1, 3, 5, 10, 30 capped at `k`.
    pub eval_ns: Option<Vec<usize>>,
    /// Seeds aggregated by the baselines.
    pub runs: Vec<u64>,
    pub kmeans_iters: usize,
}

impl PipelineConfig {
    /// Reads `file` (if any), applies `overrides` in order and fills in
    /// every missing field. Training fields not given fall back to the
    /// defaults of the selected variant.
    pub fn load(file: Option<&Path>, overrides: &[(String, Value)]) -> Result<Self, CliError> {
        let mut table = match file {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
                text.parse::<Table>()
                    .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?
            }
            None => Table::new(),
        };
        for (key, value) in overrides {
            set_path(&mut table, key, value.clone())?;
        }
        let usage = |e: toml::de::Error| CliError::Usage(format!("config: {}", e.message()));

        let k = match table.get("k") {
            Some(v) => usize::deserialize(v.clone()).map_err(usage)?,
            None => 4,
        };
        let train_table = match table.remove("train") {
            Some(Value::Table(t)) => t,
            Some(_) => return Err(CliError::Usage("config: `train` must be a table".into())),
            None => Table::new(),
        };
        let variant = match train_table.get("variant") {
            Some(v) => Variant::deserialize(v.clone()).map_err(usage)?,
            None => Variant::Mico,
        };
        if let Some(n) = train_table.get("n_clusters") {
            if usize::deserialize(n.clone()).map_err(usage)? != k {
                return Err(CliError::Usage("config: set the shard count with `k`, not `train.n_clusters`".into()));
            }
        }
        let mut train = Value::try_from(TrainConfig::for_variant(variant, k)).expect("train config serializes");
        merge(&mut train, Value::Table(train_table));
        table.insert("train".into(), train);

        let mut full = Value::try_from(PipelineConfig::defaults()).expect("config serializes");
        merge(&mut full, Value::Table(table));
        let config = PipelineConfig::deserialize(full).map_err(usage)?;
        config.validate()?;
        Ok(config)
    }

    fn defaults() -> Self {
        PipelineConfig {
            paths: Paths::default(),
            corpus_format: "jsonl".into(),
            synth: SyntheticSpec::default(),
            featurizer: FeaturizerConfig::default(),
            k: 4,
            train: TrainConfig::for_variant(Variant::Mico, 4),
            eval_ns: None,
            runs: vec![0, 1, 2, 3, 4],
            kmeans_iters: 50,
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |m: String| Err(CliError::Usage(m));
        self.corpus_format()?;
        if self.k == 0 {
            return usage("k must be at least 1".into());
        }
        if let Some(ns) = &self.eval_ns {
            if ns.is_empty() {
                return usage("eval_ns must not be empty".into());
            }
            if let Some(n) = ns.iter().find(|&&n| n == 0 || n > self.k) {
                return usage(format!("eval_ns entry {n} outside [1, {}]", self.k));
            }
        }
        if self.runs.is_empty() {
            return usage("runs must list at least one seed".into());
        }
        let p = &self.paths;
        let all = [
            &p.root, &p.corpus, &p.vocab, &p.query_vocab, &p.features, &p.checkpoint, &p.training_log,
            &p.shardmap, &p.routing, &p.baselines, &p.reports,
        ];
        if all.iter().any(|p| p.as_os_str().is_empty()) {
            return usage("paths must be nonempty".into());
        }
        Ok(())
    }

    pub fn corpus_format(&self) -> Result<CorpusFormat, CliError> {
        self.corpus_format.parse().map_err(CliError::Usage)
    }

    pub fn eval_ns(&self) -> Vec<usize> {
        match &self.eval_ns {
            Some(ns) => ns.clone(),
            None => DEFAULT_EVAL_NS.iter().copied().filter(|&n| n <= self.k).collect(),
        }
    }

    pub fn path(&self, p: &Path) -> PathBuf {
        self.paths.resolve(p)
    }
}

/// Parses `a.b.c=value`. The value is read as a TOML literal, falling
/// back to a bare string.
pub fn parse_override(raw: &str) -> Result<(String, Value), String> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| format!("expected `path=value`, got `{raw}`"))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(format!("bad key `{key}`"));
    }
    let value = value.trim();
    let parsed = format!("v = {value}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(value.to_string()));
    Ok((key.to_string(), parsed))
}

fn set_path(table: &mut Table, key: &str, value: Value) -> Result<(), CliError> {
    let mut parts = key.split('.').peekable();
    let mut current = table;
    while let Some(part) = parts.next() {
        if parts.peek().is_none() {
            current.insert(part.to_string(), value);
            return Ok(());
        }
        let next = current
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        current = next
            .as_table_mut()
            .ok_or_else(|| CliError::Usage(format!("cannot set `{key}`: `{part}` is not a table")))?;
    }
    Ok(())
}

/// Recursively overlays `top` onto `base`.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Table(b), Value::Table(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn load(overrides: &[&str]) -> Result<PipelineConfig, CliError> {
        let parsed: Vec<(String, Value)> = overrides.iter().map(|o| parse_override(o).unwrap()).collect();
        PipelineConfig::load(None, &parsed)
    }

    #[test]
    fn defaults_follow_the_variant() {
        let mico = load(&[]).unwrap();
        assert_eq!(mico.train, TrainConfig::for_variant(Variant::Mico, 4));
        let q = load(&["train.variant=\"mico-q\""]).unwrap();
        assert_eq!(q.train.beta, 3.0);
        assert_eq!(q.train.gamma, 3.0);
        assert_eq!(q.train.clip_norm, 1.0);
        assert_eq!(q.train.theta_steps, 4);
        let tuned = load(&["train.variant=mico_q", "train.beta=5", "k=8"]).unwrap();
        assert_eq!(tuned.train.beta, 5.0);
        assert_eq!(tuned.train.theta_steps, 4);
        assert_eq!(tuned.train.n_clusters, 8);
    }

    #[test]
    fn eval_ns_default_is_capped_at_k() {
        assert_eq!(load(&[]).unwrap().eval_ns(), vec![1, 3]);
        assert_eq!(load(&["k=64"]).unwrap().eval_ns(), vec![1, 3, 5, 10, 30]);
        assert_eq!(load(&["k=10", "eval_ns=[1,10]"]).unwrap().eval_ns(), vec![1, 10]);
        assert!(matches!(load(&["eval_ns=[1,5]"]), Err(CliError::Usage(_))));
    }

    #[test]
    fn bad_values_are_usage_errors() {
        for bad in [&["train.beta=\"x\""][..], &["nonsense=1"], &["corpus_format=xml"], &["train.n_clusters=3"]] {
            assert!(matches!(load(bad), Err(CliError::Usage(_))), "{bad:?}");
        }
        assert!(parse_override("novalue").is_err());
        assert!(parse_override("a..b=1").is_err());
    }

    #[test]
    fn overrides_parse_literals_and_bare_strings() {
        assert_eq!(parse_override("a.b=3").unwrap(), ("a.b".into(), Value::Integer(3)));
        assert_eq!(parse_override("x=true").unwrap().1, Value::Boolean(true));
        assert_eq!(parse_override("p=out/dir").unwrap().1, Value::String("out/dir".into()));
    }

    #[test]
    fn file_then_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.toml");
        fs::write(&file, "k = 8\n[train]\nbeta = 2.5\nseed = 3\n[paths]\nroot = \"out\"\n").unwrap();
        let c = PipelineConfig::load(Some(&file), &[parse_override("train.seed=9").unwrap()]).unwrap();
        assert_eq!(c.k, 8);
        assert_eq!(c.train.beta, 2.5);
        assert_eq!(c.train.seed, 9);
        assert_eq!(c.path(&c.paths.shardmap), PathBuf::from("out/shardmap.tsv"));
    }
}
