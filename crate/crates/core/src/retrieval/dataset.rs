use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::seeded;

/// Feature vectors with class labels, stable ids and a query subset.
///
/// Features are kept as given (not normalized); scorers that need unit
/// vectors normalize on the fly.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    name: String,
    dim: usize,
    features: Vec<f64>,
    labels: Option<Vec<i32>>,
    ids: Vec<String>,
    query_indices: Vec<usize>,
}

impl Dataset {
    /// `features` is row-major `N x dim`. Ids default to the record index.
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        features: Vec<f64>,
        labels: Option<Vec<i32>>,
        ids: Option<Vec<String>>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Dataset("feature dimension must be positive".into()));
        }
        if !features.len().is_multiple_of(dim) {
            return Err(Error::Dataset(format!(
                "{} feature values do not divide into rows of {dim}",
                features.len()
            )));
        }
        let n = features.len() / dim;
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::dims("dataset labels", n, l.len()));
            }
        }
        let ids = match ids {
            Some(ids) if ids.len() != n => return Err(Error::dims("dataset ids", n, ids.len())),
            Some(ids) => ids,
            None => (0..n).map(|i| i.to_string()).collect(),
        };
        Ok(Self { name: name.into(), dim, features, labels, ids, query_indices: Vec::new() })
    }

    /// Builds a dataset from one vector per item.
    pub fn from_rows(name: impl Into<String>, rows: &[Vec<f64>], labels: Option<Vec<i32>>) -> Result<Self> {
        let dim = rows.first().map(Vec::len).unwrap_or(0);
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != dim) {
            return Err(Error::Dataset(format!("row {i} has {} values, expected {dim}", r.len())));
        }
        Self::new(name, dim.max(1), rows.concat(), labels, None)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn set_name(&mut self, name: impl Into<String>) {
        self.name = name.into();
    }

    pub fn len(&self) -> usize {
        self.features.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn has_labels(&self) -> bool {
        self.labels.is_some()
    }

    pub fn labels(&self) -> Result<&[i32]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::Dataset(format!("dataset '{}' has no class labels", self.name)))
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn query_indices(&self) -> &[usize] {
        &self.query_indices
    }

    pub fn set_queries(&mut self, mut queries: Vec<usize>) -> Result<()> {
        queries.sort_unstable();
        queries.dedup();
        if let Some(&bad) = queries.iter().find(|&&q| q >= self.len()) {
            return Err(Error::Dataset(format!("query index {bad} out of range for {} items", self.len())));
        }
        self.query_indices = queries;
        Ok(())
    }

    /// Marks `round(fraction * n_c)` random members of every class with at
    /// least two members as queries.
    pub fn split_queries(&mut self, fraction: f64, seed: u64) -> Result<()> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::InvalidConfig(format!("query fraction must lie in [0, 1], got {fraction}")));
        }
        let mut rng = seeded(seed);
        let mut queries = Vec::new();
        for members in self.classes()?.values() {
            if members.len() < 2 {
                continue;
            }
            let take = ((fraction * members.len() as f64).round() as usize).min(members.len() - 1);
            let mut m = members.clone();
            m.shuffle(&mut rng);
            queries.extend_from_slice(&m[..take]);
        }
        self.set_queries(queries)
    }

    /// Items that are not queries: the pool training pairs are drawn from.
    pub fn training_indices(&self) -> Vec<usize> {
        let mut is_query = vec![false; self.len()];
        for &q in &self.query_indices {
            is_query[q] = true;
        }
        (0..self.len()).filter(|&i| !is_query[i]).collect()
    }

    /// Item indices grouped by class label, in ascending label order.
    pub fn classes(&self) -> Result<BTreeMap<i32, Vec<usize>>> {
        let mut out: BTreeMap<i32, Vec<usize>> = BTreeMap::new();
        for (i, &l) in self.labels()?.iter().enumerate() {
            out.entry(l).or_default().push(i);
        }
        Ok(out)
    }

    /// Same labels, ids and queries with features replaced, e.g. by an
    /// encoder's outputs.
    pub fn with_features(&self, dim: usize, features: Vec<f64>) -> Result<Self> {
        if features.len() != self.len() * dim {
            return Err(Error::dims("replacement features", self.len() * dim, features.len()));
        }
        let mut out =
            Self::new(self.name.clone(), dim, features, self.labels.clone(), Some(self.ids.clone()))?;
        out.query_indices = self.query_indices.clone();
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Dataset {
        let rows: Vec<Vec<f64>> = (0..12).map(|i| vec![i as f64, 1.0]).collect();
        let labels = (0..12).map(|i| (i % 3) as i32).collect();
        Dataset::from_rows("toy", &rows, Some(labels)).unwrap()
    }

    #[test]
    fn rejects_ragged_inputs() {
        assert!(Dataset::new("x", 3, vec![0.0; 7], None, None).is_err());
        assert!(Dataset::new("x", 2, vec![0.0; 4], Some(vec![1]), None).is_err());
        assert!(Dataset::new("x", 0, vec![], None, None).is_err());
    }

    #[test]
    fn default_ids_are_indices() {
        let d = toy();
        assert_eq!(d.ids()[5], "5");
        assert_eq!(d.row(5), &[5.0, 1.0]);
    }

    #[test]
    fn query_split_is_stratified_and_deterministic() {
        let mut a = toy();
        a.split_queries(0.25, 7).unwrap();
        let mut b = toy();
        b.split_queries(0.25, 7).unwrap();
        assert_eq!(a.query_indices(), b.query_indices());
        // 4 members per class -> one query each
        assert_eq!(a.query_indices().len(), 3);
        let labels = a.labels().unwrap();
        let mut seen: Vec<i32> = a.query_indices().iter().map(|&q| labels[q]).collect();
        seen.sort();
        assert_eq!(seen, vec![0, 1, 2]);
        assert_eq!(a.training_indices().len(), 9);
    }

    #[test]
    fn split_never_consumes_a_whole_class() {
        let mut d = toy();
        d.split_queries(1.0, 0).unwrap();
        assert_eq!(d.query_indices().len(), 9);
    }

    #[test]
    fn bad_query_index() {
        let mut d = toy();
        assert!(d.set_queries(vec![12]).is_err());
    }

    #[test]
    fn unlabeled_dataset_reports_missing_labels() {
        let d = Dataset::new("u", 1, vec![1.0, 2.0], None, None).unwrap();
        assert!(d.labels().is_err());
    }
}
