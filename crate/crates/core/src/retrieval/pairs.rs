use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::baselines::cosine_similarity;
use crate::error::{Error, Result};
use crate::rng::seeded;
use crate::simnet::PairLabel;

/// A labeled pair of dataset items and their cosine similarity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pair {
    pub i: usize,
    pub j: usize,
    pub label: PairLabel,
    pub baseline_sim: f64,
}

impl Pair {
    /// Builds the pair from dataset labels and features.
    pub fn from_dataset(dataset: &Dataset, i: usize, j: usize) -> Result<Self> {
        if i == j {
            return Err(Error::Dataset(format!("self-pair ({i}, {i})")));
        }
        let labels = dataset.labels()?;
        Ok(Self {
            i,
            j,
            label: PairLabel::from_classes(labels[i], labels[j]),
            baseline_sim: cosine_similarity(dataset.row(i), dataset.row(j))?,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PairBatch {
    pub pairs: Vec<Pair>,
}

impl PairBatch {
    pub fn new(pairs: Vec<Pair>) -> Self {
        Self { pairs }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn similar_count(&self) -> usize {
        self.pairs.iter().filter(|p| p.label == PairLabel::Similar).count()
    }

    /// Checks every pair against the dataset: no self-pairs, labels and
    /// baseline similarities consistent with the stored features.
    pub fn validate(&self, dataset: &Dataset) -> Result<()> {
        for p in &self.pairs {
            if p.i >= dataset.len() || p.j >= dataset.len() {
                return Err(Error::Dataset(format!(
                    "pair ({}, {}) out of range for {} items",
                    p.i,
                    p.j,
                    dataset.len()
                )));
            }
            let fresh = Pair::from_dataset(dataset, p.i, p.j)?;
            if fresh.label != p.label || fresh.baseline_sim != p.baseline_sim {
                return Err(Error::Dataset(format!("pair ({}, {}) disagrees with the dataset", p.i, p.j)));
            }
        }
        Ok(())
    }
}

/// Draws `floor(n/2)` similar and `ceil(n/2)` dissimilar pairs from the
/// dataset's non-query items.
///
/// Similar pairs pick a class uniformly among classes with two or more
/// members, then two distinct members uniformly. Dissimilar pairs pick the
/// first item uniformly and the second uniformly among items of other classes.
pub fn sample_balanced_pairs(dataset: &Dataset, n_pairs: usize, seed: u64) -> Result<PairBatch> {
    sample_balanced_pairs_from(dataset, &dataset.training_indices(), n_pairs, seed)
}

/// [`sample_balanced_pairs`] restricted to an explicit item pool.
pub fn sample_balanced_pairs_from(
    dataset: &Dataset,
    pool: &[usize],
    n_pairs: usize,
    seed: u64,
) -> Result<PairBatch> {
    let labels = dataset.labels()?;
    let mut by_class: std::collections::BTreeMap<i32, Vec<usize>> = Default::default();
    for &i in pool {
        by_class.entry(labels[i]).or_default().push(i);
    }
    if by_class.len() < 2 {
        return Err(Error::Dataset(format!(
            "need at least 2 classes to form dissimilar pairs, found {}",
            by_class.len()
        )));
    }
    let multi: Vec<&Vec<usize>> = by_class.values().filter(|m| m.len() >= 2).collect();
    if multi.is_empty() {
        return Err(Error::Dataset("every class is a singleton; no similar pair can be formed".into()));
    }

    let mut rng = seeded(seed);
    let n_similar = n_pairs / 2;
    let mut pairs = Vec::with_capacity(n_pairs);
    for _ in 0..n_similar {
        let members = multi[rng.random_range(0..multi.len())];
        let a = rng.random_range(0..members.len());
        let mut b = rng.random_range(0..members.len() - 1);
        if b >= a {
            b += 1;
        }
        pairs.push(Pair::from_dataset(dataset, members[a], members[b])?);
    }
    for _ in n_similar..n_pairs {
        let i = pool[rng.random_range(0..pool.len())];
        let j = loop {
            let j = pool[rng.random_range(0..pool.len())];
            if labels[j] != labels[i] {
                break j;
            }
        };
        pairs.push(Pair::from_dataset(dataset, i, j)?);
    }
    Ok(PairBatch { pairs })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_class() -> Dataset {
        let rows = vec![vec![1.0, 0.0], vec![0.9, 0.1], vec![0.0, 1.0], vec![0.1, 0.9]];
        Dataset::from_rows("two", &rows, Some(vec![0, 0, 1, 1])).unwrap()
    }

    #[test]
    fn two_pairs_on_two_classes() {
        let b = sample_balanced_pairs(&two_class(), 2, 0).unwrap();
        assert_eq!(b.len(), 2);
        assert_eq!(b.similar_count(), 1);
        b.validate(&two_class()).unwrap();
    }

    #[test]
    fn odd_count_favors_dissimilar() {
        let b = sample_balanced_pairs(&two_class(), 7, 1).unwrap();
        assert_eq!(b.similar_count(), 3);
        assert_eq!(b.len(), 7);
    }

    #[test]
    fn deterministic_given_seed() {
        let d = two_class();
        assert_eq!(sample_balanced_pairs(&d, 50, 4).unwrap(), sample_balanced_pairs(&d, 50, 4).unwrap());
    }

    #[test]
    fn labels_match_endpoints_and_no_self_pairs() {
        let d = two_class();
        let labels = d.labels().unwrap();
        for p in sample_balanced_pairs(&d, 200, 9).unwrap().pairs {
            assert_ne!(p.i, p.j);
            assert_eq!(p.label == PairLabel::Similar, labels[p.i] == labels[p.j]);
        }
    }

    #[test]
    fn singleton_classes_rejected() {
        let rows = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let d = Dataset::from_rows("s", &rows, Some(vec![0, 1])).unwrap();
        assert!(sample_balanced_pairs(&d, 4, 0).is_err());
    }

    #[test]
    fn single_class_rejected() {
        let rows = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let d = Dataset::from_rows("s", &rows, Some(vec![3, 3])).unwrap();
        assert!(sample_balanced_pairs(&d, 4, 0).is_err());
    }

    #[test]
    fn queries_are_not_sampled() {
        let mut d = two_class();
        d.set_queries(vec![0]).unwrap();
        for p in sample_balanced_pairs(&d, 100, 2).unwrap().pairs {
            assert!(p.i != 0 && p.j != 0);
        }
    }
}
