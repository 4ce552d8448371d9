//! Synthetic labeled feature sets with "bridge" items: blends of two class
//! prototypes carrying their own label. A bridge item can be close to
//! members of both classes while those members are far from each other,
//! which no metric distance captures without also ranking the two classes
//! close together.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::baselines::cosine_similarity;
use crate::error::{Error, Result};
use crate::retrieval::Dataset;
use crate::rng::{derive, SimRng};
use crate::simnet::random_unit_vector;

const STREAM_PROTOTYPES: u64 = 30;
const STREAM_MEMBERS: u64 = 31;
const STREAM_QUERIES: u64 = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_classes: usize,
    pub per_class_count: usize,
    pub dim: usize,
    /// Standard deviation of the Gaussian noise added to each component of
    /// a prototype before normalization.
    pub intra_class_noise: f64,
    /// Share of each paired class's slots given to bridge items instead.
    pub bridge_fraction: f64,
    /// Share of every class marked as queries.
    pub query_fraction: f64,
    pub seed: u64,
    /// Minimum gap for a triple to count as a triangle violation.
    pub violation_margin: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_classes: 10,
            per_class_count: 60,
            dim: 64,
            intra_class_noise: 0.4,
            bridge_fraction: 0.3,
            query_fraction: 0.2,
            seed: 0,
            violation_margin: 0.05,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::InvalidConfig("need at least 2 classes".into()));
        }
        if self.per_class_count == 0 || self.dim == 0 {
            return Err(Error::InvalidConfig("per-class count and dimension must be positive".into()));
        }
        if !(self.intra_class_noise > 0.0 && self.intra_class_noise.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "intra-class noise must be > 0, got {}",
                self.intra_class_noise
            )));
        }
        if !(0.0..=1.0).contains(&self.bridge_fraction) {
            return Err(Error::InvalidConfig(format!(
                "bridge fraction must lie in [0, 1], got {}",
                self.bridge_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.query_fraction) {
            return Err(Error::InvalidConfig(format!(
                "query fraction must lie in [0, 1], got {}",
                self.query_fraction
            )));
        }
        if self.query_fraction > 0.0 && self.per_class_count < 2 {
            return Err(Error::InvalidConfig("queries need at least 2 items per class".into()));
        }
        Ok(())
    }

    /// Bridge slots taken from each class that has a partner.
    pub fn bridge_slots(&self) -> usize {
        (self.bridge_fraction * self.per_class_count as f64).round() as usize
    }
}

/// Items `a` (class `c`), `b` (bridge of `c` and `c'`) and `c` (class `c'`)
/// with `cos(a, c) + margin < min(cos(a, b), cos(b, c))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TriangleViolation {
    pub a: usize,
    pub b: usize,
    pub c: usize,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthMetadata {
    pub spec: SynthSpec,
    pub n_items: usize,
    pub n_bridge_items: usize,
    /// Label of the bridge class for each paired `(class, class)`.
    pub bridge_classes: Vec<(i32, i32, i32)>,
    pub class_counts: Vec<(i32, usize)>,
    pub n_queries: usize,
    /// Triples found by exhaustive scan over every bridge class.
    pub triangle_violations: usize,
    /// The triple with the largest gap.
    pub strongest_violation: Option<TriangleViolation>,
}

fn noisy(center: &[f64], sigma: f64, rng: &mut SimRng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = center.iter().map(|c| c + sigma * rng.sample::<f64, _>(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Classes `2m` and `2m + 1` are paired; with an odd class count the last
/// class has no partner. Each paired class gives `bridge_slots` of its
/// `per_class_count` slots to the pair's bridge class, labeled
/// `n_classes + m`, so the item total stays `n_classes * per_class_count`.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<(Dataset, SynthMetadata)> {
    spec.validate()?;
    let k = spec.dim;
    let mut proto_rng = derive(spec.seed, STREAM_PROTOTYPES);
    let prototypes: Vec<Vec<f64>> =
        (0..spec.n_classes).map(|_| random_unit_vector(&mut proto_rng, k)).collect();
    let mut rng = derive(spec.seed, STREAM_MEMBERS);
    let slots = spec.bridge_slots();
    let n_pairs = spec.n_classes / 2;
    let partnered = |c: usize| c < 2 * n_pairs;

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels: Vec<i32> = Vec::new();
    for (c, p) in prototypes.iter().enumerate() {
        let members = if partnered(c) { spec.per_class_count - slots } else { spec.per_class_count };
        for _ in 0..members {
            rows.push(noisy(p, spec.intra_class_noise, &mut rng));
            labels.push(c as i32);
        }
    }
    let mut bridge_classes = Vec::new();
    let mut bridge_ranges = Vec::new();
    if slots > 0 {
        for m in 0..n_pairs {
            let (c1, c2) = (2 * m, 2 * m + 1);
            let label = (spec.n_classes + m) as i32;
            let mid: Vec<f64> =
                prototypes[c1].iter().zip(&prototypes[c2]).map(|(a, b)| 0.5 * (a + b)).collect();
            let start = rows.len();
            for _ in 0..2 * slots {
                rows.push(noisy(&mid, spec.intra_class_noise, &mut rng));
                labels.push(label);
            }
            bridge_classes.push((c1 as i32, c2 as i32, label));
            bridge_ranges.push((c1 as i32, c2 as i32, start..rows.len()));
        }
    }

    let n_bridge_items = bridge_ranges.iter().map(|(_, _, r)| r.len()).sum();
    let mut dataset = Dataset::from_rows("synthetic", &rows, Some(labels.clone()))?;
    if spec.query_fraction > 0.0 {
        let mut qrng = derive(spec.seed, STREAM_QUERIES);
        dataset.split_queries(spec.query_fraction, rng_seed(&mut qrng))?;
    }

    let mut violations = 0;
    let mut strongest: Option<TriangleViolation> = None;
    for (c1, c2, range) in &bridge_ranges {
        let side_a: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == *c1).collect();
        let side_c: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == *c2).collect();
        let cross: Vec<Vec<f64>> = side_a
            .iter()
            .map(|&a| side_c.iter().map(|&c| cosine_similarity(&rows[a], &rows[c])).collect())
            .collect::<Result<_>>()?;
        for b in range.clone() {
            let to_a =
                side_a.iter().map(|&a| cosine_similarity(&rows[a], &rows[b])).collect::<Result<Vec<_>>>()?;
            let to_c =
                side_c.iter().map(|&c| cosine_similarity(&rows[b], &rows[c])).collect::<Result<Vec<_>>>()?;
            for (ia, &a) in side_a.iter().enumerate() {
                for (ic, &c) in side_c.iter().enumerate() {
                    let gap = to_a[ia].min(to_c[ic]) - cross[ia][ic];
                    if gap > spec.violation_margin {
                        violations += 1;
                        if strongest.is_none_or(|s| gap > s.gap) {
                            strongest = Some(TriangleViolation { a, b, c, gap });
                        }
                    }
                }
            }
        }
    }

    let class_counts = dataset.classes()?.into_iter().map(|(l, members)| (l, members.len())).collect();
    let meta = SynthMetadata {
        spec: spec.clone(),
        n_items: dataset.len(),
        n_bridge_items,
        bridge_classes,
        class_counts,
        n_queries: dataset.query_indices().len(),
        triangle_violations: violations,
        strongest_violation: strongest,
    };
    Ok((dataset, meta))
}

fn rng_seed(rng: &mut SimRng) -> u64 {
    rng.random()
}
