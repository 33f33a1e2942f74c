//! Gallery/query retrieval by cosine similarity with mAP and CMC.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ranks reported by default.
pub const DEFAULT_KS: [usize; 3] = [1, 5, 10];

/// Gallery indices of one query, best match first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingResult {
    pub query_index: usize,
    pub ordered_gallery: Vec<usize>,
    pub scores: Vec<f64>,
}

fn normalized_rows(rows: &[Vec<f64>], what: &str) -> Result<Vec<Vec<f64>>> {
    rows.iter()
        .enumerate()
        .map(|(i, r)| {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 || !n.is_finite() {
                return Err(Error::invalid(format!("{what} feature {i} has zero or non-finite norm")));
            }
            Ok(r.iter().map(|v| v / n).collect())
        })
        .collect()
}

/// Sorts gallery items by descending cosine similarity to each query;
/// equal scores keep ascending gallery order.
pub fn rank_gallery(queries: &[Vec<f64>], gallery: &[Vec<f64>]) -> Result<Vec<RankingResult>> {
    if gallery.is_empty() {
        return Err(Error::invalid("empty gallery"));
    }
    let dim = gallery[0].len();
    if let Some(bad) = queries.iter().chain(gallery).find(|r| r.len() != dim) {
        return Err(Error::Shape {
            expected: format!("features of length {dim}"),
            got: bad.len().to_string(),
        });
    }
    let q = normalized_rows(queries, "query")?;
    let g = normalized_rows(gallery, "gallery")?;
    Ok(q.par_iter()
        .enumerate()
        .map(|(qi, qv)| {
            let sims: Vec<f64> = g
                .iter()
                .map(|gv| qv.iter().zip(gv).map(|(a, b)| a * b).sum())
                .collect();
            let mut order: Vec<usize> = (0..g.len()).collect();
            order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
            let scores = order.iter().map(|&i| sims[i]).collect();
            RankingResult {
                query_index: qi,
                ordered_gallery: order,
                scores,
            }
        })
        .collect())
}

/// Mean of precision@r over the ranks `r` holding a relevant item.
///
/// `relevance` is indexed by gallery index. Returns `None` when nothing is
/// relevant, which excludes the query from mAP.
pub fn average_precision(ranking: &RankingResult, relevance: &[bool]) -> Option<f64> {
    let total = relevance.iter().filter(|&&r| r).count();
    if total == 0 {
        return None;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank0, &g) in ranking.ordered_gallery.iter().enumerate() {
        if relevance[g] {
            hits += 1;
            sum += hits as f64 / (rank0 + 1) as f64;
            if hits == total {
                break;
            }
        }
    }
    Some(sum / total as f64)
}

/// 1-based rank of the first relevant gallery item.
pub fn first_hit_rank(ranking: &RankingResult, relevance: &[bool]) -> Option<usize> {
    ranking
        .ordered_gallery
        .iter()
        .position(|&g| relevance[g])
        .map(|p| p + 1)
}

/// Fraction of queries whose first correct match is within the top `k`.
/// Queries with no relevant gallery item are skipped.
pub fn cmc_at_k<F>(rankings: &[RankingResult], relevant: F, ks: &[usize]) -> BTreeMap<usize, f64>
where
    F: Fn(usize, usize) -> bool,
{
    let first_hits: Vec<usize> = rankings
        .iter()
        .filter_map(|r| r.ordered_gallery.iter().position(|&g| relevant(r.query_index, g)))
        .map(|p| p + 1)
        .collect();
    let n = first_hits.len();
    ks.iter()
        .map(|&k| {
            let v = if n == 0 {
                0.0
            } else {
                first_hits.iter().filter(|&&r| r <= k).count() as f64 / n as f64
            };
            (k, v)
        })
        .collect()
}

/// Mean and 95 % normal-approximation half-width over runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunStat {
    pub mean: f64,
    pub ci95: f64,
}

impl RunStat {
    pub fn from_values(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let ci95 = if values.len() < 2 {
            0.0
        } else {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            1.96 * var.sqrt() / n.sqrt()
        };
        Self { mean, ci95 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunAggregate {
    pub n_runs: usize,
    pub map: RunStat,
    pub cmc: BTreeMap<usize, RunStat>,
    pub map_per_run: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub map: f64,
    pub cmc: BTreeMap<usize, f64>,
    /// AP of every query that had a match, in query order.
    pub per_query_ap: Vec<(usize, f64)>,
    pub n_query: usize,
    pub n_gallery: usize,
    pub excluded_queries: usize,
    pub runs: Option<RunAggregate>,
}

/// Full retrieval evaluation with label-equality relevance.
pub fn evaluate(
    query: &[Vec<f64>],
    query_labels: &[usize],
    gallery: &[Vec<f64>],
    gallery_labels: &[usize],
) -> Result<MetricsReport> {
    if query.len() != query_labels.len() || gallery.len() != gallery_labels.len() {
        return Err(Error::invalid("feature and label counts differ"));
    }
    if query.is_empty() {
        return Err(Error::invalid("empty query set"));
    }
    let rankings = rank_gallery(query, gallery)?;
    let mut per_query_ap = Vec::new();
    for r in &rankings {
        let y = query_labels[r.query_index];
        let relevance: Vec<bool> = gallery_labels.iter().map(|&g| g == y).collect();
        match average_precision(r, &relevance) {
            Some(ap) => per_query_ap.push((r.query_index, ap)),
            None => log::warn!("query {} has no gallery match; excluded", r.query_index),
        }
    }
    let excluded = rankings.len() - per_query_ap.len();
    if per_query_ap.is_empty() {
        return Err(Error::invalid("no query has a matching gallery identity"));
    }
    let map = per_query_ap.iter().map(|(_, ap)| ap).sum::<f64>() / per_query_ap.len() as f64;
    let cmc = cmc_at_k(
        &rankings,
        |q, g| query_labels[q] == gallery_labels[g],
        &DEFAULT_KS,
    );
    Ok(MetricsReport {
        map,
        cmc,
        per_query_ap,
        n_query: query.len(),
        n_gallery: gallery.len(),
        excluded_queries: excluded,
        runs: None,
    })
}

/// Averages reports from repeated runs and attaches 95 % intervals.
pub fn aggregate_runs(reports: &[MetricsReport]) -> Result<MetricsReport> {
    if reports.len() < 2 {
        return Err(Error::invalid("aggregation needs at least two runs"));
    }
    let maps: Vec<f64> = reports.iter().map(|r| r.map).collect();
    let map = RunStat::from_values(&maps);
    let mut cmc_stats = BTreeMap::new();
    for &k in reports[0].cmc.keys() {
        let vals: Vec<f64> = reports
            .iter()
            .map(|r| r.cmc.get(&k).copied().ok_or_else(|| Error::invalid(format!("run lacks CMC@{k}"))))
            .collect::<Result<_>>()?;
        cmc_stats.insert(k, RunStat::from_values(&vals));
    }
    let first = &reports[0];
    Ok(MetricsReport {
        map: map.mean,
        cmc: cmc_stats.iter().map(|(k, s)| (*k, s.mean)).collect(),
        per_query_ap: Vec::new(),
        n_query: first.n_query,
        n_gallery: first.n_gallery,
        excluded_queries: first.excluded_queries,
        runs: Some(RunAggregate {
            n_runs: reports.len(),
            map,
            cmc: cmc_stats,
            map_per_run: maps,
        }),
    })
}

/// On-disk report layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub map: f64,
    pub cmc: BTreeMap<String, f64>,
    pub n_query: usize,
    pub n_gallery: usize,
    pub excluded_queries: usize,
    pub runs: ReportRuns,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRuns {
    pub n: usize,
    pub map_ci95: f64,
    pub cmc_ci95: BTreeMap<String, f64>,
    pub map_per_run: Vec<f64>,
}

impl MetricsReport {
    pub fn to_file(&self) -> ReportFile {
        let cmc = self.cmc.iter().map(|(k, v)| (k.to_string(), *v)).collect();
        let runs = match &self.runs {
            Some(agg) => ReportRuns {
                n: agg.n_runs,
                map_ci95: agg.map.ci95,
                cmc_ci95: agg.cmc.iter().map(|(k, s)| (k.to_string(), s.ci95)).collect(),
                map_per_run: agg.map_per_run.clone(),
            },
            None => ReportRuns {
                n: 1,
                map_ci95: 0.0,
                cmc_ci95: self.cmc.keys().map(|k| (k.to_string(), 0.0)).collect(),
                map_per_run: vec![self.map],
            },
        };
        ReportFile {
            map: self.map,
            cmc,
            n_query: self.n_query,
            n_gallery: self.n_gallery,
            excluded_queries: self.excluded_queries,
            runs,
        }
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_file())?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// `query,ap` rows for error analysis.
    pub fn write_per_query_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["query", "ap"])?;
        for (q, ap) in &self.per_query_ap {
            w.write_record([q.to_string(), format!("{ap:.9}")])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Total order used when comparing float scores for display and ranking.
pub fn score_order(a: f64, b: f64) -> Ordering {
    b.total_cmp(&a)
}
