//! Queries, documents, graded relevance edges and query splits.
//!
//! On disk a corpus is a directory holding `documents.jsonl`,
//! `queries.jsonl` (or `.tsv` equivalents), `edges.tsv` and `splits.tsv`.
//! Only queries are split; documents are shared by every split.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub id: String,
    pub text: String,
}

/// A relevance label such as `impression`, `click`, `purchase`, `DL` or `PL`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Grade(pub String);

impl Grade {
    pub fn new(label: impl Into<String>) -> Self {
        Grade(label.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Grade {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RelevanceEdge {
    pub query_id: String,
    pub doc_id: String,
    pub grade: Grade,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

/// Which relevance grades count as an edge.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum GradeFilter {
    #[default]
    All,
    Only(BTreeSet<Grade>),
}

impl GradeFilter {
    pub fn only<I, S>(grades: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        GradeFilter::Only(grades.into_iter().map(|g| Grade(g.into())).collect())
    }

    /// An empty list means every grade.
    pub fn from_labels(labels: &[String]) -> Self {
        if labels.is_empty() {
            GradeFilter::All
        } else {
            Self::only(labels.iter().cloned())
        }
    }

    pub fn accepts(&self, grade: &Grade) -> bool {
        match self {
            GradeFilter::All => true,
            GradeFilter::Only(set) => set.contains(grade),
        }
    }
}

/// On-disk layout of document and query files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CorpusFormat {
    #[default]
    Jsonl,
    Tsv,
}

impl FromStr for CorpusFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "jsonl" => Ok(CorpusFormat::Jsonl),
            "tsv" => Ok(CorpusFormat::Tsv),
            other => Err(format!("unknown corpus format `{other}`")),
        }
    }
}

impl CorpusFormat {
    fn extension(self) -> &'static str {
        match self {
            CorpusFormat::Jsonl => "jsonl",
            CorpusFormat::Tsv => "tsv",
        }
    }
}

/// A validated, immutable corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    documents: Vec<Document>,
    queries: Vec<Query>,
    edges: Vec<RelevanceEdge>,
    /// `(query index, doc index)` for each edge, same order as `edges`.
    edge_index: Vec<(usize, usize)>,
    splits: Vec<Split>,
    doc_lookup: HashMap<String, usize>,
    query_lookup: HashMap<String, usize>,
}

impl Corpus {
    /// Validates ids and edges. `splits` maps query ids to splits; queries
    /// without an entry default to [`Split::Train`].
    pub fn new(
        documents: Vec<Document>,
        queries: Vec<Query>,
        edges: Vec<RelevanceEdge>,
        splits: &HashMap<String, Split>,
    ) -> Result<Self> {
        let doc_lookup = index_ids(documents.iter().map(|d| d.id.as_str()), "document")?;
        let query_lookup = index_ids(queries.iter().map(|q| q.id.as_str()), "query")?;

        let mut seen = HashSet::with_capacity(edges.len());
        let mut edge_index = Vec::with_capacity(edges.len());
        for edge in &edges {
            let q = *query_lookup
                .get(&edge.query_id)
                .ok_or_else(|| Error::DanglingReference {
                    kind: "query",
                    id: edge.query_id.clone(),
                })?;
            let d = *doc_lookup
                .get(&edge.doc_id)
                .ok_or_else(|| Error::DanglingReference {
                    kind: "document",
                    id: edge.doc_id.clone(),
                })?;
            if !seen.insert((q, d, &edge.grade)) {
                return Err(Error::DuplicateId {
                    kind: "edge",
                    id: format!("{}\t{}\t{}", edge.query_id, edge.doc_id, edge.grade),
                });
            }
            edge_index.push((q, d));
        }

        for id in splits.keys() {
            if !query_lookup.contains_key(id) {
                return Err(Error::DanglingReference {
                    kind: "query",
                    id: id.clone(),
                });
            }
        }
        let splits = queries
            .iter()
            .map(|q| splits.get(&q.id).copied().unwrap_or(Split::Train))
            .collect();

        Ok(Corpus {
            documents,
            queries,
            edges,
            edge_index,
            splits,
            doc_lookup,
            query_lookup,
        })
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn queries(&self) -> &[Query] {
        &self.queries
    }

    pub fn edges(&self) -> &[RelevanceEdge] {
        &self.edges
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    pub fn split_of(&self, query: usize) -> Split {
        self.splits[query]
    }

    pub fn doc_position(&self, id: &str) -> Option<usize> {
        self.doc_lookup.get(id).copied()
    }

    pub fn query_position(&self, id: &str) -> Option<usize> {
        self.query_lookup.get(id).copied()
    }

    /// Query indices belonging to `split`, in corpus order.
    pub fn queries_in(&self, split: Split) -> Vec<usize> {
        (0..self.queries.len())
            .filter(|&q| self.splits[q] == split)
            .collect()
    }

    /// Edges as `(query index, doc index, grade)`.
    pub fn indexed_edges(&self) -> impl Iterator<Item = (usize, usize, &Grade)> + '_ {
        self.edge_index
            .iter()
            .zip(&self.edges)
            .map(|(&(q, d), e)| (q, d, &e.grade))
    }

    /// Distinct relevant documents of every query under `filter`, sorted.
    pub fn relevant_docs(&self, filter: &GradeFilter) -> Vec<Vec<usize>> {
        let mut rel = vec![Vec::new(); self.queries.len()];
        for (q, d, grade) in self.indexed_edges() {
            if filter.accepts(grade) {
                rel[q].push(d);
            }
        }
        for docs in &mut rel {
            docs.sort_unstable();
            docs.dedup();
        }
        rel
    }

    fn with_splits(mut self, splits: Vec<Split>) -> Self {
        self.splits = splits;
        self
    }
}

fn index_ids<'a>(
    ids: impl Iterator<Item = &'a str>,
    kind: &'static str,
) -> Result<HashMap<String, usize>> {
    let mut lookup = HashMap::new();
    for (i, id) in ids.enumerate() {
        if lookup.insert(id.to_string(), i).is_some() {
            return Err(Error::DuplicateId {
                kind,
                id: id.to_string(),
            });
        }
    }
    Ok(lookup)
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l.to_string()))
        .collect())
}

fn parse_error(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

#[derive(Deserialize, Serialize)]
struct TextRecord {
    id: String,
    text: String,
}

fn read_texts(path: &Path, format: CorpusFormat) -> Result<Vec<TextRecord>> {
    let mut out = Vec::new();
    for (line, content) in read_lines(path)? {
        let record = match format {
            CorpusFormat::Jsonl => serde_json::from_str::<TextRecord>(&content)
                .map_err(|e| parse_error(path, line, e.to_string()))?,
            CorpusFormat::Tsv => {
                let (id, text) = content
                    .split_once('\t')
                    .ok_or_else(|| parse_error(path, line, "expected `id<TAB>text`"))?;
                TextRecord {
                    id: id.to_string(),
                    text: text.to_string(),
                }
            }
        };
        out.push(record);
    }
    Ok(out)
}

fn tsv_fields<'a>(path: &Path, line: usize, content: &'a str, n: usize) -> Result<Vec<&'a str>> {
    let fields: Vec<&str> = content.split('\t').collect();
    if fields.len() != n {
        return Err(parse_error(
            path,
            line,
            format!("expected {n} tab-separated fields, found {}", fields.len()),
        ));
    }
    Ok(fields)
}

/// Loads a corpus directory. `edges.tsv` is required (it may be empty);
/// `splits.tsv` is optional and missing entries default to train.
pub fn load_corpus(dir: impl AsRef<Path>, format: CorpusFormat) -> Result<Corpus> {
    let dir = dir.as_ref();
    let ext = format.extension();
    let documents = read_texts(&dir.join(format!("documents.{ext}")), format)?
        .into_iter()
        .map(|r| Document {
            id: r.id,
            text: r.text,
        })
        .collect();
    let queries = read_texts(&dir.join(format!("queries.{ext}")), format)?
        .into_iter()
        .map(|r| Query {
            id: r.id,
            text: r.text,
        })
        .collect();

    let edges_path = dir.join("edges.tsv");
    let mut edges = Vec::new();
    for (line, content) in read_lines(&edges_path)? {
        let f = tsv_fields(&edges_path, line, &content, 3)?;
        edges.push(RelevanceEdge {
            query_id: f[0].to_string(),
            doc_id: f[1].to_string(),
            grade: Grade::new(f[2]),
        });
    }

    let splits_path = dir.join("splits.tsv");
    let mut splits = HashMap::new();
    if splits_path.exists() {
        for (line, content) in read_lines(&splits_path)? {
            let f = tsv_fields(&splits_path, line, &content, 2)?;
            let split = f[1]
                .parse::<Split>()
                .map_err(|e| parse_error(&splits_path, line, e))?;
            if splits.insert(f[0].to_string(), split).is_some() {
                return Err(parse_error(
                    &splits_path,
                    line,
                    format!("query `{}` listed twice", f[0]),
                ));
            }
        }
    }

    Corpus::new(documents, queries, edges, &splits)
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    fs::File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn write_texts<'a>(
    path: &Path,
    format: CorpusFormat,
    records: impl Iterator<Item = (&'a str, &'a str)>,
) -> Result<()> {
    let mut out = create(path)?;
    let io = |e| Error::io(path, e);
    for (id, text) in records {
        match format {
            CorpusFormat::Jsonl => {
                let line = serde_json::to_string(&TextRecord {
                    id: id.to_string(),
                    text: text.to_string(),
                })?;
                writeln!(out, "{line}").map_err(io)?;
            }
            CorpusFormat::Tsv => {
                if id.contains(['\t', '\n']) || text.contains(['\t', '\n']) {
                    return Err(Error::InvalidArgument(format!(
                        "record `{id}` contains a tab or newline and cannot be written as TSV"
                    )));
                }
                writeln!(out, "{id}\t{text}").map_err(io)?;
            }
        }
    }
    out.flush().map_err(io)
}

/// Writes the corpus in the layout read by [`load_corpus`].
pub fn save_corpus(corpus: &Corpus, dir: impl AsRef<Path>, format: CorpusFormat) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let ext = format.extension();
    write_texts(
        &dir.join(format!("documents.{ext}")),
        format,
        corpus.documents.iter().map(|d| (d.id.as_str(), d.text.as_str())),
    )?;
    write_texts(
        &dir.join(format!("queries.{ext}")),
        format,
        corpus.queries.iter().map(|q| (q.id.as_str(), q.text.as_str())),
    )?;

    let path: PathBuf = dir.join("edges.tsv");
    let mut out = create(&path)?;
    for e in &corpus.edges {
        writeln!(out, "{}\t{}\t{}", e.query_id, e.doc_id, e.grade).map_err(|e| Error::io(&path, e))?;
    }
    out.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join("splits.tsv");
    let mut out = create(&path)?;
    for (q, split) in corpus.queries.iter().zip(&corpus.splits) {
        writeln!(out, "{}\t{}", q.id, split.as_str()).map_err(|e| Error::io(&path, e))?;
    }
    out.flush().map_err(|e| Error::io(&path, e))
}

/// Randomly reassigns every query to train/dev/test in proportion to
/// `ratios`, using largest-remainder rounding. Each split gets at least one
/// query.
pub fn split_queries(corpus: Corpus, ratios: [f64; 3], seed: u64) -> Result<Corpus> {
    if ratios.iter().any(|r| !(r.is_finite() && *r >= 0.0)) || ratios.iter().sum::<f64>() <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "split ratios must be nonnegative with a positive sum, got {ratios:?}"
        )));
    }
    let n = corpus.queries.len();
    if n < 3 {
        return Err(Error::InvalidArgument(format!(
            "need at least 3 queries to populate train/dev/test, found {n}"
        )));
    }
    let counts = apportion(n, &ratios);
    if counts.contains(&0) {
        return Err(Error::InvalidArgument(format!(
            "ratios {ratios:?} leave a split empty with {n} queries"
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut util::rng(seed));
    let mut splits = vec![Split::Train; n];
    let labels = [Split::Train, Split::Dev, Split::Test];
    let mut cursor = 0;
    for (label, count) in labels.iter().zip(counts) {
        for &q in &order[cursor..cursor + count] {
            splits[q] = *label;
        }
        cursor += count;
    }
    Ok(corpus.with_splits(splits))
}

/// Largest-remainder apportionment of `n` items by `weights`.
fn apportion(n: usize, weights: &[f64]) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| n as f64 * w / total).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut remaining = n - counts.iter().sum::<usize>();
    let mut by_remainder: Vec<usize> = (0..weights.len()).collect();
    by_remainder.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in by_remainder.iter().cycle() {
        if remaining == 0 {
            break;
        }
        counts[i] += 1;
        remaining -= 1;
    }
    counts
}

/// All `(query index, doc index)` train-split edges whose grade passes
/// `filter`. Entailed grades are not expanded: only edges present in the
/// data are returned.
pub fn training_pairs(corpus: &Corpus, filter: &GradeFilter) -> Result<Vec<(usize, usize)>> {
    let pairs: Vec<(usize, usize)> = corpus
        .indexed_edges()
        .filter(|&(q, _, grade)| corpus.splits[q] == Split::Train && filter.accepts(grade))
        .map(|(q, d, _)| (q, d))
        .collect();
    if pairs.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    Ok(pairs)
}

/// Parameters of the planted-cluster generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_groups: usize,
    pub docs_per_group: usize,
    pub queries_per_group: usize,
    pub vocab_per_group: usize,
    pub shared_vocab: usize,
    pub tokens_per_doc: usize,
    pub tokens_per_query: usize,
    pub edges_per_query: usize,
    /// Probability that an edge's target group is redrawn uniformly over all groups.
    pub noise_rate: f64,
    pub split_ratios: [f64; 3],
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_groups: 4,
            docs_per_group: 500,
            queries_per_group: 200,
            vocab_per_group: 100,
            shared_vocab: 20,
            tokens_per_doc: 16,
            tokens_per_query: 4,
            edges_per_query: 5,
            noise_rate: 0.05,
            split_ratios: [8.0, 1.0, 1.0],
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_groups", self.n_groups),
            ("docs_per_group", self.docs_per_group),
            ("queries_per_group", self.queries_per_group),
            ("vocab_per_group", self.vocab_per_group),
            ("shared_vocab", self.shared_vocab),
            ("tokens_per_doc", self.tokens_per_doc),
            ("tokens_per_query", self.tokens_per_query),
            ("edges_per_query", self.edges_per_query),
        ];
        for (name, value) in counts {
            if value == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be at least 1")));
            }
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return Err(Error::InvalidArgument(format!(
                "noise_rate must lie in [0, 1], got {}",
                self.noise_rate
            )));
        }
        if self.n_groups * self.queries_per_group < 3 {
            return Err(Error::InvalidArgument(
                "need at least 3 queries to populate train/dev/test".into(),
            ));
        }
        Ok(())
    }
}

/// A generated corpus plus the planted group of every document and query.
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub corpus: Corpus,
    pub doc_groups: Vec<usize>,
    pub query_groups: Vec<usize>,
}

/// Generates a bag-of-words corpus with `n_groups` planted clusters.
///
/// Group `g` owns the tokens `g{g}t{i}`; every text also draws from the
/// shared tokens `s{i}`. Each query links to `edges_per_query` distinct
/// documents of its own group, except that with probability `noise_rate` an
/// edge's target group is redrawn uniformly from all groups.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = util::rng(spec.seed);
    let n_docs = spec.n_groups * spec.docs_per_group;
    let n_queries = spec.n_groups * spec.queries_per_group;
    let pool = spec.vocab_per_group + spec.shared_vocab;

    let draw_text = |group: usize, len: usize, rng: &mut rand_chacha::ChaCha8Rng| {
        let mut words = Vec::with_capacity(len);
        for _ in 0..len {
            let pick = rng.gen_range(0..pool);
            if pick < spec.vocab_per_group {
                words.push(format!("g{group}t{pick}"));
            } else {
                words.push(format!("s{}", pick - spec.vocab_per_group));
            }
        }
        words.join(" ")
    };

    let mut documents = Vec::with_capacity(n_docs);
    let mut doc_groups = Vec::with_capacity(n_docs);
    for g in 0..spec.n_groups {
        for i in 0..spec.docs_per_group {
            documents.push(Document {
                id: format!("d{g}_{i}"),
                text: draw_text(g, spec.tokens_per_doc, &mut rng),
            });
            doc_groups.push(g);
        }
    }

    let mut queries = Vec::with_capacity(n_queries);
    let mut query_groups = Vec::with_capacity(n_queries);
    for g in 0..spec.n_groups {
        for i in 0..spec.queries_per_group {
            queries.push(Query {
                id: format!("q{g}_{i}"),
                text: draw_text(g, spec.tokens_per_query, &mut rng),
            });
            query_groups.push(g);
        }
    }

    let impression = Grade::new("impression");
    let mut edges = Vec::with_capacity(n_queries * spec.edges_per_query);
    for (q, &g) in query_groups.iter().enumerate() {
        let mut linked = HashSet::new();
        // A query can link to at most every document in the corpus.
        let target = spec.edges_per_query.min(n_docs);
        while linked.len() < target {
            let group = if rng.gen::<f64>() < spec.noise_rate {
                rng.gen_range(0..spec.n_groups)
            } else {
                g
            };
            let d = group * spec.docs_per_group + rng.gen_range(0..spec.docs_per_group);
            if linked.insert(d) {
                edges.push(RelevanceEdge {
                    query_id: queries[q].id.clone(),
                    doc_id: documents[d].id.clone(),
                    grade: impression.clone(),
                });
            }
        }
    }

    let corpus = Corpus::new(documents, queries, edges, &HashMap::new())?;
    let corpus = split_queries(corpus, spec.split_ratios, spec.seed.wrapping_add(1))?;
    Ok(SyntheticCorpus {
        corpus,
        doc_groups,
        query_groups,
    })
}
