//! Query coverage, search cost and shard balance.
//!
//! For a query `q` with `R` relevant documents and routed shards
//! `s_1, s_2, ...`, coverage at `N` is the fraction of the `R` documents
//! held by `s_1..s_N`. Resource cost is the total size of those shards and
//! latency cost is the size of the largest one. Queries without relevant
//! documents are excluded from the means and counted separately.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::selective_search::ShardMap;
use crate::util;

/// Fraction of `relevant` held by the first `n` shards of `ranking`, or
/// `None` when there are no relevant documents.
pub fn coverage_at(relevant: &[usize], shard_map: &ShardMap, ranking: &[usize], n: usize) -> Option<f64> {
    if relevant.is_empty() {
        return None;
    }
    let selected = &ranking[..n.min(ranking.len())];
    let hits = relevant
        .iter()
        .filter(|&&d| selected.contains(&shard_map.shard_of(d)))
        .count();
    Some(hits as f64 / relevant.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cost {
    pub resource: usize,
    pub latency: usize,
}

/// Documents searched when the first `n` routed shards are queried.
pub fn cost_at(ranking: &[usize], shard_map: &ShardMap, n: usize) -> Cost {
    let sizes = ranking[..n.min(ranking.len())]
        .iter()
        .map(|&s| shard_map.shard_sizes()[s]);
    Cost {
        resource: sizes.clone().sum(),
        latency: sizes.max().unwrap_or(0),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardBalance {
    /// Shard sizes, largest first.
    pub sizes: Vec<usize>,
    /// Entropy of the size distribution divided by `ln K`, in `[0, 1]`.
    pub normalized_entropy: f64,
}

pub fn shard_balance(shard_map: &ShardMap) -> ShardBalance {
    let mut sizes = shard_map.shard_sizes().to_vec();
    sizes.sort_unstable_by(|a, b| b.cmp(a));
    let total: usize = sizes.iter().sum();
    let k = sizes.len();
    let normalized_entropy = if k <= 1 || total == 0 {
        1.0
    } else {
        let probs: Vec<f64> = sizes.iter().map(|&s| s as f64 / total as f64).collect();
        (util::entropy(&probs) / (k as f64).ln()).clamp(0.0, 1.0)
    };
    ShardBalance {
        sizes,
        normalized_entropy,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean coverage (fraction) per N.
    pub coverage: BTreeMap<usize, f64>,
    pub cost_resource: BTreeMap<usize, f64>,
    pub cost_latency: BTreeMap<usize, f64>,
    /// Shard sizes, largest first.
    pub shard_size_histogram: Vec<usize>,
    pub normalized_entropy: f64,
    pub n_queries: usize,
    /// Queries skipped because they have no relevant document.
    pub n_excluded: usize,
    pub run_seed: u64,
}

/// Evaluates one shard map and routing over a query set.
///
/// `rankings[i]` is the routed shard order of `queries[i]` (at least
/// `max(ns)` long) and `relevant` is indexed by query.
pub fn evaluate(
    shard_map: &ShardMap,
    queries: &[usize],
    rankings: &[Vec<usize>],
    relevant: &[Vec<usize>],
    ns: &[usize],
    run_seed: u64,
) -> Result<EvalReport> {
    if queries.len() != rankings.len() {
        return Err(Error::DimensionMismatch {
            expected: queries.len(),
            found: rankings.len(),
        });
    }
    let k = shard_map.n_shards();
    if let Some(&bad) = ns.iter().find(|&&n| n == 0 || n > k) {
        return Err(Error::InvalidArgument(format!("N = {bad} outside [1, {k}]")));
    }
    let idx: Vec<usize> = (0..queries.len()).collect();
    let per_query: Vec<Option<Vec<(f64, Cost)>>> = par::map(&idx, |&i| {
        let rel = &relevant[queries[i]];
        if rel.is_empty() {
            return None;
        }
        Some(
            ns.iter()
                .map(|&n| {
                    let cov = coverage_at(rel, shard_map, &rankings[i], n).expect("nonempty");
                    (cov, cost_at(&rankings[i], shard_map, n))
                })
                .collect(),
        )
    });

    let mut sums = vec![(0.0, 0.0, 0.0); ns.len()];
    let mut counted = 0usize;
    for row in per_query.iter().flatten() {
        counted += 1;
        for (acc, (cov, cost)) in sums.iter_mut().zip(row) {
            acc.0 += cov;
            acc.1 += cost.resource as f64;
            acc.2 += cost.latency as f64;
        }
    }
    let denom = counted.max(1) as f64;
    let mut report = EvalReport {
        coverage: BTreeMap::new(),
        cost_resource: BTreeMap::new(),
        cost_latency: BTreeMap::new(),
        shard_size_histogram: Vec::new(),
        normalized_entropy: 0.0,
        n_queries: counted,
        n_excluded: queries.len() - counted,
        run_seed,
    };
    for (&n, (c, r, l)) in ns.iter().zip(sums) {
        report.coverage.insert(n, c / denom);
        report.cost_resource.insert(n, r / denom);
        report.cost_latency.insert(n, l / denom);
    }
    let balance = shard_balance(shard_map);
    report.shard_size_histogram = balance.sizes;
    report.normalized_entropy = balance.normalized_entropy;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and sample (n - 1) standard deviation.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        MeanStd {
            mean,
            std: var.sqrt(),
        }
    }

    /// `12.34 (0.56)` with both values scaled to percent.
    pub fn percent(&self) -> String {
        format!("{:.2} ({:.2})", 100.0 * self.mean, 100.0 * self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub coverage: BTreeMap<usize, MeanStd>,
    pub cost_resource: BTreeMap<usize, MeanStd>,
    pub cost_latency: BTreeMap<usize, MeanStd>,
    pub normalized_entropy: MeanStd,
    pub n_runs: usize,
}

pub fn aggregate_runs(reports: &[EvalReport]) -> Result<AggregateReport> {
    if reports.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "aggregation needs at least 2 runs, got {}",
            reports.len()
        )));
    }
    let per_n = |pick: fn(&EvalReport) -> &BTreeMap<usize, f64>| -> Result<BTreeMap<usize, MeanStd>> {
        let keys: Vec<usize> = pick(&reports[0]).keys().copied().collect();
        keys.into_iter()
            .map(|n| {
                let values = reports
                    .iter()
                    .map(|r| {
                        pick(r).get(&n).copied().ok_or_else(|| {
                            Error::InvalidArgument(format!("run {} lacks N = {n}", r.run_seed))
                        })
                    })
                    .collect::<Result<Vec<f64>>>()?;
                Ok((n, MeanStd::of(&values)))
            })
            .collect()
    };
    let entropies: Vec<f64> = reports.iter().map(|r| r.normalized_entropy).collect();
    Ok(AggregateReport {
        coverage: per_n(|r| &r.coverage)?,
        cost_resource: per_n(|r| &r.cost_resource)?,
        cost_latency: per_n(|r| &r.cost_latency)?,
        normalized_entropy: MeanStd::of(&entropies),
        n_runs: reports.len(),
    })
}

/// Everything written to `report.json` for one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: String,
    pub n_shards: usize,
    pub runs: Vec<EvalReport>,
    pub aggregate: Option<AggregateReport>,
}

impl MethodReport {
    pub fn new(method: impl Into<String>, n_shards: usize, runs: Vec<EvalReport>) -> Result<Self> {
        let aggregate = if runs.len() >= 2 {
            Some(aggregate_runs(&runs)?)
        } else {
            None
        };
        Ok(MethodReport {
            method: method.into(),
            n_shards,
            runs,
            aggregate,
        })
    }

    /// Per-N coverage and cost summaries across runs.
    pub fn summary(&self) -> BTreeMap<usize, (MeanStd, MeanStd, MeanStd)> {
        let ns: Vec<usize> = self
            .runs
            .first()
            .map(|r| r.coverage.keys().copied().collect())
            .unwrap_or_default();
        ns.into_iter()
            .map(|n| {
                let col = |f: fn(&EvalReport) -> &BTreeMap<usize, f64>| {
                    MeanStd::of(&self.runs.iter().map(|r| f(r)[&n]).collect::<Vec<_>>())
                };
                (
                    n,
                    (
                        col(|r| &r.coverage),
                        col(|r| &r.cost_resource),
                        col(|r| &r.cost_latency),
                    ),
                )
            })
            .collect()
    }

    /// One table row: `method  Cov_1 mean (std)  Cov_3 ...` in percent.
    pub fn table_row(&self) -> String {
        let cells: Vec<String> = self
            .summary()
            .iter()
            .map(|(n, (cov, _, _))| format!("Cov_{n} {}", cov.percent()))
            .collect();
        format!("{}\t{}", self.method, cells.join("\t"))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Writes `method,N,coverage_mean,coverage_std,cost_resource_mean,cost_latency_mean`.
pub fn write_plotdata(reports: &[MethodReport], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from(
        "method,N,coverage_mean,coverage_std,cost_resource_mean,cost_latency_mean\n",
    );
    for report in reports {
        for (n, (cov, res, lat)) in report.summary() {
            out.push_str(&format!(
                "{},{n},{:.6},{:.6},{:.3},{:.3}\n",
                report.method, cov.mean, cov.std, res.mean, lat.mean
            ));
        }
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
