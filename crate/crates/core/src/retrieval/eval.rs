//! Ranking and mean average precision.
//!
//! A query always goes in the FIRST argument of the scorer. Learned
//! similarities are not symmetric, so swapping the order can change results.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::exec::{map_indexed, Execution};

/// A pairwise similarity: higher means more similar.
pub trait Scorer: Sync {
    fn name(&self) -> String;

    fn score(&self, query: &[f64], item: &[f64]) -> Result<f64>;

    /// Scores one query against many items. On failure returns the position
    /// of the offending item.
    fn score_many(&self, query: &[f64], items: &[&[f64]]) -> std::result::Result<Vec<f64>, (usize, Error)> {
        items.iter().enumerate().map(|(k, item)| self.score(query, item).map_err(|e| (k, e))).collect()
    }
}

impl<S: Scorer + ?Sized> Scorer for &S {
    fn name(&self) -> String {
        (**self).name()
    }

    fn score(&self, query: &[f64], item: &[f64]) -> Result<f64> {
        (**self).score(query, item)
    }

    fn score_many(&self, query: &[f64], items: &[&[f64]]) -> std::result::Result<Vec<f64>, (usize, Error)> {
        (**self).score_many(query, items)
    }
}

/// Adapts a closure into a [`Scorer`].
pub struct FnScorer<F> {
    name: String,
    f: F,
}

impl<F> FnScorer<F>
where
    F: Fn(&[f64], &[f64]) -> Result<f64> + Sync,
{
    pub fn new(name: impl Into<String>, f: F) -> Self {
        Self { name: name.into(), f }
    }
}

impl<F> Scorer for FnScorer<F>
where
    F: Fn(&[f64], &[f64]) -> Result<f64> + Sync,
{
    fn name(&self) -> String {
        self.name.clone()
    }

    fn score(&self, query: &[f64], item: &[f64]) -> Result<f64> {
        (self.f)(query, item)
    }
}

/// Gallery of one query, best first.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub query: usize,
    pub items: Vec<usize>,
    pub scores: Vec<f64>,
}

/// Scores every item except the query and sorts by descending score, ties
/// broken by ascending item index.
pub fn rank<S: Scorer + ?Sized>(scorer: &S, dataset: &Dataset, query: usize) -> Result<RankedList> {
    if query >= dataset.len() {
        return Err(Error::Dataset(format!("query {query} out of range for {} items", dataset.len())));
    }
    let gallery: Vec<usize> = (0..dataset.len()).filter(|&i| i != query).collect();
    let rows: Vec<&[f64]> = gallery.iter().map(|&i| dataset.row(i)).collect();
    let scores = scorer.score_many(dataset.row(query), &rows).map_err(|(k, e)| Error::Scorer {
        query,
        item: gallery[k],
        source: Box::new(e),
    })?;
    if let Some(k) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::Scorer {
            query,
            item: gallery[k],
            source: Box::new(Error::NonFinite(format!("score {}", scores[k]))),
        });
    }
    let mut order: Vec<usize> = (0..gallery.len()).collect();
    // stable sort keeps ascending index among equal scores
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    Ok(RankedList {
        query,
        items: order.iter().map(|&k| gallery[k]).collect(),
        scores: order.iter().map(|&k| scores[k]).collect(),
    })
}

/// AP of a ranking given relevance flags in rank order; `None` if nothing is
/// relevant.
pub fn average_precision_flags(relevant_in_order: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (r, &rel) in relevant_in_order.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (r + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// AP of `ranked`, with `relevant` indexed by dataset item.
pub fn average_precision(ranked: &RankedList, relevant: &[bool]) -> Result<f64> {
    let flags: Vec<bool> = ranked.items.iter().map(|&i| relevant.get(i).copied().unwrap_or(false)).collect();
    average_precision_flags(&flags).ok_or(Error::NoRelevant { query: ranked.query })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryAp {
    pub query: usize,
    pub query_id: String,
    pub ap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scorer: String,
    pub dataset: String,
    pub map: f64,
    pub per_query: Vec<QueryAp>,
    /// Queries with no relevant gallery item; excluded from the mean.
    pub skipped_queries: Vec<usize>,
    /// Wall-clock time. The only field that varies between identical runs.
    pub elapsed_secs: f64,
}

/// One line-delimited record per query.
#[derive(Debug, Serialize, Deserialize)]
struct ApRecord<'a> {
    scorer: &'a str,
    query_id: &'a str,
    ap: f64,
}

impl EvalReport {
    /// `{"scorer":..,"query_id":..,"ap":..}` per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for q in &self.per_query {
            let rec = ApRecord { scorer: &self.scorer, query_id: &q.query_id, ap: q.ap };
            out.push_str(&serde_json::to_string(&rec).expect("serializable"));
            out.push('\n');
        }
        out
    }
}

/// Table of mAP per scorer, one row each, in the given order.
pub fn render_table(reports: &[EvalReport]) -> String {
    let width = reports.iter().map(|r| r.scorer.len()).max().unwrap_or(0).max("scorer".len());
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$}  {:>7}  {:>7}  {:>7}", "scorer", "mAP", "queries", "skipped");
    let _ = writeln!(out, "{}", "-".repeat(width + 29));
    for r in reports {
        let _ = writeln!(
            out,
            "{:<width$}  {:>7.4}  {:>7}  {:>7}",
            r.scorer,
            r.map,
            r.per_query.len(),
            r.skipped_queries.len()
        );
    }
    out
}

pub fn mean_average_precision<S: Scorer + ?Sized>(scorer: &S, dataset: &Dataset) -> Result<EvalReport> {
    mean_average_precision_with(scorer, dataset, Execution::default())
}

/// Per-query AP over the dataset's queries, evaluated independently (in
/// parallel when requested) and averaged in query order. Relevant items are
/// those sharing the query's class label.
pub fn mean_average_precision_with<S: Scorer + ?Sized>(
    scorer: &S,
    dataset: &Dataset,
    exec: Execution,
) -> Result<EvalReport> {
    let start = Instant::now();
    let labels = dataset.labels()?;
    let queries = dataset.query_indices();
    if queries.is_empty() {
        return Err(Error::Dataset(format!("dataset '{}' has no queries", dataset.name())));
    }
    let results = map_indexed(exec, queries.len(), |k| -> Result<Option<f64>> {
        let q = queries[k];
        let ranked = rank(scorer, dataset, q)?;
        let flags: Vec<bool> = ranked.items.iter().map(|&i| labels[i] == labels[q]).collect();
        Ok(average_precision_flags(&flags))
    });

    let mut per_query = Vec::new();
    let mut skipped = Vec::new();
    for (k, r) in results.into_iter().enumerate() {
        let q = queries[k];
        match r? {
            Some(ap) => per_query.push(QueryAp { query: q, query_id: dataset.ids()[q].clone(), ap }),
            None => {
                log::warn!("query {} has no relevant gallery item; skipped", dataset.ids()[q]);
                skipped.push(q);
            }
        }
    }
    if per_query.is_empty() {
        return Err(Error::NoValidQueries { skipped: skipped.len() });
    }
    let map = per_query.iter().map(|q| q.ap).sum::<f64>() / per_query.len() as f64;
    Ok(EvalReport {
        scorer: scorer.name(),
        dataset: dataset.name().to_string(),
        map,
        per_query,
        skipped_queries: skipped,
        elapsed_secs: start.elapsed().as_secs_f64(),
    })
}
