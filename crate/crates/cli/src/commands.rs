use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use selsearch_core::baselines::{Baseline, Method};
use selsearch_core::corpus::{generate_synthetic, load_corpus, save_corpus, Corpus, GradeFilter, Split};
use selsearch_core::evaluation::{evaluate, write_plotdata, EvalReport, MethodReport};
use selsearch_core::featurizer::{
    load_stopwords, load_vectors, save_vectors, FeatureSet, FeaturizerConfig, Vocabularies, Vocabulary,
};
use selsearch_core::model::{load_checkpoint, save_checkpoint, MicoModel};
use selsearch_core::selective_search::{
    assign_documents, load_routing, route_queries, save_routing, RoutingResult, ShardMap,
};
use selsearch_core::trainer::{fit_with, EpochRecord};

use crate::config::PipelineConfig;
use crate::CliError;

/// Fails with the stage that produces `path` when it is missing.
fn require(path: &Path, stage: &str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Runtime(format!(
            "missing {} (run `selsearch {stage}` first)",
            path.display()
        )))
    }
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::Runtime(format!("{}: {e}", parent.display())))?;
    }
    Ok(())
}

fn load_input_corpus(config: &PipelineConfig) -> Result<Corpus, CliError> {
    let dir = config.path(&config.paths.corpus);
    require(&dir, "synth")?;
    Ok(load_corpus(&dir, config.corpus_format()?)?)
}

/// The featurizer settings with the stop-word file folded in.
fn featurizer(config: &PipelineConfig) -> Result<FeaturizerConfig, CliError> {
    let mut fc = config.featurizer.clone();
    if let Some(p) = &config.paths.stopwords {
        fc.stopwords.extend(load_stopwords(config.path(p))?);
    }
    fc.validate()?;
    Ok(fc)
}

fn load_vocabs(config: &PipelineConfig, fc: &FeaturizerConfig) -> Result<Vocabularies, CliError> {
    let read = |p: &PathBuf| -> Result<Vocabulary, CliError> {
        let path = config.path(p);
        require(&path, "vocab")?;
        let (vocab, hash) = Vocabulary::load(&path)?;
        if hash != fc.hash() {
            return Err(CliError::Runtime(format!(
                "{} was built with different featurizer settings (rerun `selsearch vocab`)",
                path.display()
            )));
        }
        Ok(vocab)
    };
    let doc = read(&config.paths.vocab)?;
    if fc.separate_vocab {
        Ok(Vocabularies {
            query: read(&config.paths.query_vocab)?,
            doc,
            separate: true,
        })
    } else {
        Ok(Vocabularies {
            query: doc.clone(),
            doc,
            separate: false,
        })
    }
}

fn feature_paths(config: &PipelineConfig) -> (PathBuf, PathBuf) {
    let dir = config.path(&config.paths.features);
    (dir.join("queries.vec"), dir.join("docs.vec"))
}

fn load_features(config: &PipelineConfig, corpus: &Corpus) -> Result<FeatureSet, CliError> {
    let fc = featurizer(config)?;
    let vocabs = load_vocabs(config, &fc)?;
    let (qpath, dpath) = feature_paths(config);
    require(&qpath, "featurize")?;
    require(&dpath, "featurize")?;
    Ok(FeatureSet {
        queries: load_vectors(&qpath, corpus.queries().iter().map(|q| q.id.as_str()), vocabs.query.len())?,
        docs: load_vectors(&dpath, corpus.documents().iter().map(|d| d.id.as_str()), vocabs.doc.len())?,
        query_dim: vocabs.query.len(),
        doc_dim: vocabs.doc.len(),
    })
}

fn load_model(config: &PipelineConfig) -> Result<MicoModel, CliError> {
    let path = config.path(&config.paths.checkpoint);
    require(&path, "train")?;
    let (model, _) = load_checkpoint(&path)?;
    if model.n_clusters() != config.k {
        return Err(CliError::Runtime(format!(
            "{} has {} shards but k = {}",
            path.display(),
            model.n_clusters(),
            config.k
        )));
    }
    Ok(model)
}

fn eval_filter(config: &PipelineConfig) -> GradeFilter {
    GradeFilter::from_labels(&config.train.eval_grades)
}

fn report_path(config: &PipelineConfig, method: &str) -> PathBuf {
    config.path(&config.paths.reports).join(format!("{method}.json"))
}

fn print_report(report: &MethodReport) {
    println!("{}", report.table_row());
}

pub fn synth(config: &PipelineConfig) -> Result<(), CliError> {
    config.synth.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let synth = generate_synthetic(&config.synth)?;
    let dir = config.path(&config.paths.corpus);
    fs::create_dir_all(&dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
    save_corpus(&synth.corpus, &dir, config.corpus_format()?)?;
    eprintln!(
        "wrote {} documents, {} queries, {} edges to {}",
        synth.corpus.documents().len(),
        synth.corpus.queries().len(),
        synth.corpus.edges().len(),
        dir.display()
    );
    Ok(())
}

pub fn vocab(config: &PipelineConfig) -> Result<(), CliError> {
    let corpus = load_input_corpus(config)?;
    let fc = featurizer(config)?;
    let vocabs = Vocabularies::build(&corpus, &fc)?;
    let doc_path = config.path(&config.paths.vocab);
    ensure_parent(&doc_path)?;
    vocabs.doc.save(&doc_path, &fc.hash())?;
    if vocabs.separate {
        let q_path = config.path(&config.paths.query_vocab);
        ensure_parent(&q_path)?;
        vocabs.query.save(&q_path, &fc.hash())?;
        eprintln!("query vocabulary: {} terms", vocabs.query.len());
    }
    eprintln!("document vocabulary: {} terms", vocabs.doc.len());
    Ok(())
}

pub fn featurize(config: &PipelineConfig) -> Result<(), CliError> {
    let corpus = load_input_corpus(config)?;
    let fc = featurizer(config)?;
    let vocabs = load_vocabs(config, &fc)?;
    let features = FeatureSet::compute(&corpus, &vocabs, &fc);
    let (qpath, dpath) = feature_paths(config);
    ensure_parent(&qpath)?;
    save_vectors(&qpath, corpus.queries().iter().map(|q| q.id.as_str()).zip(&features.queries))?;
    save_vectors(&dpath, corpus.documents().iter().map(|d| d.id.as_str()).zip(&features.docs))?;
    let empty = features.docs.iter().filter(|d| d.is_empty()).count();
    eprintln!(
        "featurized {} queries and {} documents ({empty} empty documents)",
        features.queries.len(),
        features.docs.len()
    );
    Ok(())
}

pub fn train(config: &PipelineConfig) -> Result<(), CliError> {
    config.train.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let corpus = load_input_corpus(config)?;
    let features = load_features(config, &corpus)?;
    let start = Instant::now();
    let (model, log) = fit_with(&corpus, &features, &config.train, |e: &EpochRecord| {
        let dev = match (e.dev_cov1, e.dev_cost1) {
            (Some(c), Some(s)) => format!("  dev Cov_1 {:.4}  cost_1 {:.4}", c, s),
            _ => String::new(),
        };
        eprintln!(
            "epoch {:>3}  H_cross {:.4}  H+ {:.4}  H_q {:.4}  loss {:.4}{dev}  {:.1}s",
            e.epoch, e.mean_h_cross, e.mean_h_plus, e.mean_h_q, e.mean_total, e.wallclock_s
        );
    })?;
    let ckpt = config.path(&config.paths.checkpoint);
    ensure_parent(&ckpt)?;
    save_checkpoint(&model, &ckpt, &config.train.hash())?;
    let log_path = config.path(&config.paths.training_log);
    ensure_parent(&log_path)?;
    log.save_jsonl(&log_path)?;
    eprintln!(
        "kept epoch {} of {} ({:.1}s); checkpoint {}",
        log.best_epoch,
        log.epochs.len(),
        start.elapsed().as_secs_f64(),
        ckpt.display()
    );
    Ok(())
}

pub fn shard(config: &PipelineConfig) -> Result<(), CliError> {
    let corpus = load_input_corpus(config)?;
    let model = load_model(config)?;
    let features = load_features(config, &corpus)?;
    let map = assign_documents(&model, &features.docs)?;
    let path = config.path(&config.paths.shardmap);
    ensure_parent(&path)?;
    map.save(&corpus, &path)?;
    eprintln!("shard sizes {:?}", map.shard_sizes());
    Ok(())
}

pub fn route(config: &PipelineConfig, top: Option<usize>) -> Result<(), CliError> {
    let top = top.unwrap_or(config.k);
    if top == 0 || top > config.k {
        return Err(CliError::Usage(format!("--top must lie in [1, {}], got {top}", config.k)));
    }
    let corpus = load_input_corpus(config)?;
    let model = load_model(config)?;
    let features = load_features(config, &corpus)?;
    let all: Vec<usize> = (0..corpus.queries().len()).collect();
    let routed = route_queries(&model, &corpus, &features.queries, &all, top)?;
    let path = config.path(&config.paths.routing);
    ensure_parent(&path)?;
    save_routing(&routed, &path)?;
    eprintln!("routed {} queries to their top {top} shards", routed.len());
    Ok(())
}

/// Test-split rankings looked up by query id.
fn test_rankings(corpus: &Corpus, routed: &[RoutingResult]) -> Result<(Vec<usize>, Vec<Vec<usize>>), CliError> {
    let by_id: HashMap<&str, &RoutingResult> = routed.iter().map(|r| (r.query_id.as_str(), r)).collect();
    let queries = corpus.queries_in(Split::Test);
    let rankings = queries
        .iter()
        .map(|&q| {
            let id = &corpus.queries()[q].id;
            by_id
                .get(id.as_str())
                .map(|r| r.shards())
                .ok_or_else(|| CliError::Runtime(format!("routing has no entry for test query `{id}`")))
        })
        .collect::<Result<_, _>>()?;
    Ok((queries, rankings))
}

fn check_depth(rankings: &[Vec<usize>], ns: &[usize]) -> Result<(), CliError> {
    let max_n = ns.iter().copied().max().unwrap_or(1);
    if let Some(short) = rankings.iter().map(Vec::len).filter(|&l| l < max_n).min() {
        return Err(CliError::Runtime(format!(
            "routing lists only {short} shards but eval_ns goes up to {max_n} (rerun `selsearch route` with a larger --top)"
        )));
    }
    Ok(())
}

pub fn eval(config: &PipelineConfig, name: Option<String>) -> Result<(), CliError> {
    let corpus = load_input_corpus(config)?;
    let map_path = config.path(&config.paths.shardmap);
    require(&map_path, "shard")?;
    let map = ShardMap::load(&corpus, &map_path, config.k)?;
    let routing_path = config.path(&config.paths.routing);
    require(&routing_path, "route")?;
    let routed = load_routing(&routing_path)?;
    let (queries, rankings) = test_rankings(&corpus, &routed)?;
    let ns = config.eval_ns();
    check_depth(&rankings, &ns)?;
    let relevant = corpus.relevant_docs(&eval_filter(config));
    let report = evaluate(&map, &queries, &rankings, &relevant, &ns, config.train.seed)?;
    let method = name.unwrap_or_else(|| {
        let base = config.train.variant.to_string();
        if config.train.share_towers {
            format!("{base}-par")
        } else {
            base
        }
    });
    save_method_report(config, &method, vec![report])
}

fn save_method_report(config: &PipelineConfig, method: &str, runs: Vec<EvalReport>) -> Result<(), CliError> {
    let report = MethodReport::new(method, config.k, runs)?;
    let path = report_path(config, method);
    ensure_parent(&path)?;
    report.save(&path)?;
    print_report(&report);
    Ok(())
}

pub fn baseline(config: &PipelineConfig, method: Method) -> Result<(), CliError> {
    let corpus = load_input_corpus(config)?;
    let features = load_features(config, &corpus)?;
    let ns = config.eval_ns();
    let relevant = corpus.relevant_docs(&eval_filter(config));
    let queries = corpus.queries_in(Split::Test);
    let dir = config.path(&config.paths.baselines).join(method.as_str());
    let mut runs = Vec::new();
    for (i, &seed) in config.runs.iter().enumerate() {
        let b = Baseline::fit(method, &corpus, &features, config.k, seed, config.kmeans_iters)?;
        let routed = b.route_queries(&corpus, &features.queries, &queries, config.k)?;
        let rankings: Vec<Vec<usize>> = routed.iter().map(|r| r.shards()).collect();
        runs.push(evaluate(&b.shard_map, &queries, &rankings, &relevant, &ns, seed)?);
        if i == 0 {
            fs::create_dir_all(&dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
            b.shard_map.save(&corpus, dir.join("shardmap.tsv"))?;
            save_routing(&routed, dir.join("routing.tsv"))?;
        }
    }
    save_method_report(config, method.as_str(), runs)
}

pub fn report(config: &PipelineConfig) -> Result<(), CliError> {
    let dir = config.path(&config.paths.reports);
    require(&dir, "eval")?;
    let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Runtime(format!(
            "no reports in {} (run `selsearch eval` or `selsearch baseline` first)",
            dir.display()
        )));
    }
    let reports = paths
        .iter()
        .map(MethodReport::load)
        .collect::<Result<Vec<_>, _>>()?;
    for r in &reports {
        print_report(r);
    }
    let out = dir.join("plotdata.csv");
    write_plotdata(&reports, &out)?;
    eprintln!("wrote {}", out.display());
    Ok(())
}
