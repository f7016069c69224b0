//! Tokenization, frequency-capped vocabularies and TF-IDF sparse vectors.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Split};
use crate::error::{Error, Result};
use crate::{par, util};

/// Inverse document frequency weighting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IdfVariant {
    /// `ln(N / df)`
    #[default]
    Plain,
    /// `ln((1 + N) / (1 + df)) + 1`
    Smooth,
}

impl IdfVariant {
    pub fn idf(self, corpus_size: usize, df: usize) -> f64 {
        let n = corpus_size as f64;
        let df = df as f64;
        match self {
            IdfVariant::Plain => (n / df).ln(),
            IdfVariant::Smooth => ((1.0 + n) / (1.0 + df)).ln() + 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeaturizerConfig {
    pub vocab_size: usize,
    pub stopwords: BTreeSet<String>,
    /// Build independent query and document vocabularies.
    pub separate_vocab: bool,
    pub idf_variant: IdfVariant,
    pub l2_normalize: bool,
}

impl Default for FeaturizerConfig {
    fn default() -> Self {
        FeaturizerConfig {
            vocab_size: 20_000,
            stopwords: BTreeSet::new(),
            separate_vocab: false,
            idf_variant: IdfVariant::Plain,
            l2_normalize: true,
        }
    }
}

impl FeaturizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 {
            return Err(Error::InvalidArgument("vocab_size must be at least 1".into()));
        }
        Ok(())
    }

    /// Stable fingerprint of every setting that affects vectors.
    pub fn hash(&self) -> String {
        let stop: Vec<&str> = self.stopwords.iter().map(String::as_str).collect();
        util::short_hash(&format!(
            "vocab_size={};stopwords={};separate_vocab={};idf={:?};l2={}",
            self.vocab_size,
            stop.join(","),
            self.separate_vocab,
            self.idf_variant,
            self.l2_normalize
        ))
    }
}

/// Reads a stop-word file: one word per line, `#` starts a comment.
pub fn load_stopwords(path: impl AsRef<Path>) -> Result<BTreeSet<String>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(|l| l.split('#').next().unwrap_or("").trim().to_lowercase())
        .filter(|w| !w.is_empty())
        .collect())
}

/// Lowercases, splits on anything that is not alphanumeric and drops stop
/// words. Duplicates are preserved.
pub fn tokenize(text: &str, stopwords: &BTreeSet<String>) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .filter(|t| !stopwords.contains(t))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    lookup: HashMap<String, usize>,
    df: Vec<usize>,
    corpus_size: usize,
    max_size: usize,
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.lookup.get(token).copied()
    }

    pub fn token(&self, index: usize) -> &str {
        &self.tokens[index]
    }

    pub fn df(&self, index: usize) -> usize {
        self.df[index]
    }

    pub fn corpus_size(&self) -> usize {
        self.corpus_size
    }

    pub fn max_size(&self) -> usize {
        self.max_size
    }

    /// Writes `vocab.tsv`: a `#corpus_size=..` header, then `token\tindex\tdf`.
    pub fn save(&self, path: impl AsRef<Path>, config_hash: &str) -> Result<()> {
        let path = path.as_ref();
        let io = |e| Error::io(path, e);
        let mut out = BufWriter::new(fs::File::create(path).map_err(io)?);
        writeln!(
            out,
            "#corpus_size={}\tmax_size={}\tconfig_hash={config_hash}",
            self.corpus_size, self.max_size
        )
        .map_err(io)?;
        for (i, token) in self.tokens.iter().enumerate() {
            writeln!(out, "{token}\t{i}\t{}", self.df[i]).map_err(io)?;
        }
        out.flush().map_err(io)
    }

    /// Loads a vocabulary and returns it with the recorded config hash.
    pub fn load(path: impl AsRef<Path>) -> Result<(Vocabulary, String)> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let bad = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| bad(1, "missing header".into()))?;
        let header = header
            .strip_prefix('#')
            .ok_or_else(|| bad(1, "header must start with `#`".into()))?;
        let mut fields = HashMap::new();
        for kv in header.split('\t') {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| bad(1, format!("malformed header field `{kv}`")))?;
            fields.insert(k, v);
        }
        let number = |key: &str| -> Result<usize> {
            fields
                .get(key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| bad(1, format!("header lacks numeric `{key}`")))
        };
        let corpus_size = number("corpus_size")?;
        let max_size = number("max_size")?;
        let hash = fields.get("config_hash").copied().unwrap_or("").to_string();

        let mut tokens = Vec::new();
        let mut df = Vec::new();
        for (i, line) in lines {
            let parts: Vec<&str> = line.split('\t').collect();
            if parts.len() != 3 {
                return Err(bad(i + 1, "expected `token\\tindex\\tdf`".into()));
            }
            let index: usize = parts[1]
                .parse()
                .map_err(|_| bad(i + 1, "bad index".into()))?;
            if index != tokens.len() {
                return Err(bad(i + 1, format!("index {index} out of order")));
            }
            let d: usize = parts[2].parse().map_err(|_| bad(i + 1, "bad df".into()))?;
            if d == 0 || d > corpus_size {
                return Err(bad(i + 1, format!("df {d} outside [1, {corpus_size}]")));
            }
            tokens.push(parts[0].to_string());
            df.push(d);
        }
        let lookup = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok((
            Vocabulary {
                tokens,
                lookup,
                df,
                corpus_size,
                max_size,
            },
            hash,
        ))
    }
}

/// Keeps the `max_size` most frequent tokens (ties broken lexicographically).
/// Document frequency counts the texts containing each token.
pub fn build_vocab<T: AsRef<[String]>>(texts: &[T], max_size: usize) -> Result<Vocabulary> {
    if max_size == 0 {
        return Err(Error::InvalidArgument("vocab_size must be at least 1".into()));
    }
    let mut total: HashMap<&str, usize> = HashMap::new();
    let mut df: HashMap<&str, usize> = HashMap::new();
    for text in texts {
        let mut seen = BTreeSet::new();
        for token in text.as_ref() {
            *total.entry(token).or_default() += 1;
            if seen.insert(token.as_str()) {
                *df.entry(token).or_default() += 1;
            }
        }
    }
    if total.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot build a vocabulary from texts with no tokens".into(),
        ));
    }
    let mut ranked: Vec<(&str, usize)> = total.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.truncate(max_size);

    let tokens: Vec<String> = ranked.iter().map(|(t, _)| t.to_string()).collect();
    let df = ranked.iter().map(|(t, _)| df[t]).collect();
    let lookup = tokens
        .iter()
        .enumerate()
        .map(|(i, t)| (t.clone(), i))
        .collect();
    Ok(Vocabulary {
        tokens,
        lookup,
        df,
        corpus_size: texts.len(),
        max_size,
    })
}

/// A sparse feature vector with strictly increasing indices and positive weights.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseVector {
    entries: Vec<(usize, f64)>,
}

impl SparseVector {
    /// Sorts by index, drops non-positive weights and rejects duplicates.
    pub fn new(mut entries: Vec<(usize, f64)>) -> Result<Self> {
        entries.retain(|&(_, w)| w > 0.0);
        entries.sort_by_key(|&(i, _)| i);
        if entries.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::InvalidArgument(
                "sparse vector has a repeated index".into(),
            ));
        }
        if entries.iter().any(|&(_, w)| !w.is_finite()) {
            return Err(Error::InvalidArgument("non-finite sparse weight".into()));
        }
        Ok(SparseVector { entries })
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn norm(&self) -> f64 {
        self.entries.iter().map(|(_, w)| w * w).sum::<f64>().sqrt()
    }

    pub fn max_index(&self) -> Option<usize> {
        self.entries.last().map(|&(i, _)| i)
    }

    pub fn dot_dense(&self, dense: &[f64]) -> f64 {
        self.entries.iter().map(|&(i, w)| w * dense[i]).sum()
    }

    /// `index:weight,...` with 9 significant digits.
    pub fn to_field(&self) -> String {
        self.entries
            .iter()
            .map(|&(i, w)| format!("{i}:{}", util::format_significant(w, 9)))
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn parse_field(field: &str) -> Result<Self, String> {
        if field.is_empty() {
            return Ok(SparseVector::default());
        }
        let mut entries = Vec::new();
        for item in field.split(',') {
            let (i, w) = item
                .split_once(':')
                .ok_or_else(|| format!("expected `index:weight`, got `{item}`"))?;
            let i = i.parse().map_err(|_| format!("bad index `{i}`"))?;
            let w = w.parse().map_err(|_| format!("bad weight `{w}`"))?;
            entries.push((i, w));
        }
        SparseVector::new(entries).map_err(|e| e.to_string())
    }
}

/// TF-IDF of a token sequence: raw counts times idf, out-of-vocabulary
/// tokens dropped, zero weights removed, optionally L2-normalized.
pub fn tfidf(tokens: &[String], vocab: &Vocabulary, config: &FeaturizerConfig) -> SparseVector {
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for t in tokens {
        if let Some(i) = vocab.index_of(t) {
            *counts.entry(i).or_default() += 1;
        }
    }
    let mut entries: Vec<(usize, f64)> = counts
        .into_iter()
        .map(|(i, tf)| {
            (
                i,
                tf as f64 * config.idf_variant.idf(vocab.corpus_size, vocab.df[i]),
            )
        })
        .filter(|&(_, w)| w > 0.0)
        .collect();
    entries.sort_by_key(|&(i, _)| i);
    if config.l2_normalize {
        let norm = entries.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
        if norm > 0.0 {
            for (_, w) in &mut entries {
                *w /= norm;
            }
        }
    }
    SparseVector { entries }
}

/// Query and document vocabularies. With a shared vocabulary both fields
/// hold the same table.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabularies {
    pub query: Vocabulary,
    pub doc: Vocabulary,
    pub separate: bool,
}

impl Vocabularies {
    /// Builds from documents plus train-split queries, or separately from
    /// each when `config.separate_vocab` is set.
    pub fn build(corpus: &Corpus, config: &FeaturizerConfig) -> Result<Self> {
        config.validate()?;
        let doc_tokens: Vec<Vec<String>> = par::map(corpus.documents(), |d| {
            tokenize(&d.text, &config.stopwords)
        });
        let query_tokens: Vec<Vec<String>> = corpus
            .queries_in(Split::Train)
            .into_iter()
            .map(|q| tokenize(&corpus.queries()[q].text, &config.stopwords))
            .collect();
        if config.separate_vocab {
            Ok(Vocabularies {
                query: build_vocab(&query_tokens, config.vocab_size)?,
                doc: build_vocab(&doc_tokens, config.vocab_size)?,
                separate: true,
            })
        } else {
            let mut all = doc_tokens;
            all.extend(query_tokens);
            let shared = build_vocab(&all, config.vocab_size)?;
            Ok(Vocabularies {
                query: shared.clone(),
                doc: shared,
                separate: false,
            })
        }
    }
}

/// TF-IDF vectors for every query and document, aligned with corpus order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub queries: Vec<SparseVector>,
    pub docs: Vec<SparseVector>,
    pub query_dim: usize,
    pub doc_dim: usize,
}

impl FeatureSet {
    pub fn compute(corpus: &Corpus, vocabs: &Vocabularies, config: &FeaturizerConfig) -> Self {
        let queries = par::map(corpus.queries(), |q| {
            tfidf(&tokenize(&q.text, &config.stopwords), &vocabs.query, config)
        });
        let docs = par::map(corpus.documents(), |d| {
            tfidf(&tokenize(&d.text, &config.stopwords), &vocabs.doc, config)
        });
        FeatureSet {
            queries,
            docs,
            query_dim: vocabs.query.len(),
            doc_dim: vocabs.doc.len(),
        }
    }
}

/// Writes `id\tindex:weight,...` lines.
pub fn save_vectors<'a>(
    path: impl AsRef<Path>,
    rows: impl IntoIterator<Item = (&'a str, &'a SparseVector)>,
) -> Result<()> {
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let mut out = BufWriter::new(fs::File::create(path).map_err(io)?);
    for (id, v) in rows {
        writeln!(out, "{id}\t{}", v.to_field()).map_err(io)?;
    }
    out.flush().map_err(io)
}

/// Reads a vector file and aligns it with `ids`. Every id must be present.
pub fn load_vectors<'a>(
    path: impl AsRef<Path>,
    ids: impl IntoIterator<Item = &'a str>,
    dim: usize,
) -> Result<Vec<SparseVector>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut by_id = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let bad = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let (id, field) = line
            .split_once('\t')
            .ok_or_else(|| bad("expected `id\\tvector`".into()))?;
        let v = SparseVector::parse_field(field).map_err(bad)?;
        if let Some(max) = v.max_index() {
            if max >= dim {
                return Err(Error::IndexOutOfRange { index: max, dim });
            }
        }
        by_id.insert(id.to_string(), v);
    }
    ids.into_iter()
        .map(|id| {
            by_id.remove(id).ok_or_else(|| Error::DanglingReference {
                kind: "vector",
                id: id.to_string(),
            })
        })
        .collect()
}
