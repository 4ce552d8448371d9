//! Central finite-difference gradient checks.

use rand::seq::index::sample;

use super::{GradientSet, Network};
use crate::error::{Error, Result};
use crate::rng::seeded;

/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamRef {
    pub layer: usize,
    pub is_bias: bool,
    pub index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoordinateSelection {
    All,
    /// `count` distinct parameters drawn uniformly with the given seed.
    Sample {
        count: usize,
        seed: u64,
    },
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// NaN if any compared value was NaN.
    pub max_relative_error: f64,
    pub worst: Option<ParamRef>,
    pub checked: usize,
    pub diagnostic: Option<String>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_relative_error <= tolerance
    }
}

fn param_ref(net: &Network, flat: usize) -> ParamRef {
    let (layer, is_w, index) = net.locate(flat).expect("flat index in range");
    ParamRef { layer, is_bias: !is_w, index }
}

/// Checks the gradient of `sum(net(input))` over every parameter.
pub fn grad_check(net: &Network, input: &[f64], epsilon: f64) -> Result<GradCheckReport> {
    let (out, cache) = net.forward(input)?;
    let analytic = net.backprop(&cache, &vec![1.0; out.len()])?;
    grad_check_with(net, &analytic, CoordinateSelection::All, epsilon, |n| {
        Ok(n.forward(input)?.0.iter().sum())
    })
}

/// Compares `analytic` against central differences of an arbitrary scalar
/// objective of the network parameters.
pub fn grad_check_with<F>(
    net: &Network,
    analytic: &GradientSet,
    selection: CoordinateSelection,
    epsilon: f64,
    objective: F,
) -> Result<GradCheckReport>
where
    F: Fn(&Network) -> Result<f64>,
{
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(Error::InvalidConfig(format!("epsilon must be > 0, got {epsilon}")));
    }
    let flat = analytic.flatten();
    if flat.len() != net.param_count() {
        return Err(Error::dims("analytic gradient", net.param_count(), flat.len()));
    }
    let coords: Vec<usize> = match selection {
        CoordinateSelection::All => (0..flat.len()).collect(),
        CoordinateSelection::Sample { count, seed } => {
            let mut idx = sample(&mut seeded(seed), flat.len(), count.min(flat.len())).into_vec();
            idx.sort_unstable();
            idx
        }
    };

    let mut probe = net.clone();
    let mut worst = 0.0f64;
    let mut worst_at = None;
    let mut diagnostic = None;
    for &k in &coords {
        let original = probe.param(k).expect("index in range");
        probe.set_param(k, original + epsilon)?;
        let plus = objective(&probe)?;
        probe.set_param(k, original - epsilon)?;
        let minus = objective(&probe)?;
        probe.set_param(k, original)?;
        let numeric = (plus - minus) / (2.0 * epsilon);
        let err = relative_error(flat[k], numeric);
        if err.is_nan() {
            let at = param_ref(net, k);
            return Ok(GradCheckReport {
                max_relative_error: f64::NAN,
                worst: Some(at),
                checked: coords.len(),
                diagnostic: Some(format!(
                    "NaN at layer {} {} {} (parameter {original}, analytic {}, numeric {numeric})",
                    at.layer,
                    if at.is_bias { "bias" } else { "weight" },
                    at.index,
                    flat[k]
                )),
            });
        }
        if err > worst || worst_at.is_none() {
            worst = worst.max(err);
            worst_at = Some(param_ref(net, k));
            if err > 0.0 {
                diagnostic = Some(format!("analytic {} vs numeric {numeric}", flat[k]));
            }
        }
    }
    Ok(GradCheckReport { max_relative_error: worst, worst: worst_at, checked: coords.len(), diagnostic })
}

/// Smallest |pre-activation| over the ReLU layers for `input`. Finite
/// differences are unreliable when this is close to zero.
pub fn min_abs_preactivation(net: &Network, input: &[f64]) -> Result<f64> {
    let (_, cache) = net.forward(input)?;
    let hidden = net.layers().len() - 1;
    Ok((0..hidden)
        .flat_map(|i| cache.pre_activation(i).iter().map(|v| v.abs()))
        .fold(f64::INFINITY, f64::min))
}
