use serde::{Deserialize, Serialize};

/// Whether two images show the same class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum PairLabel {
    Dissimilar,
    Similar,
}

impl PairLabel {
    pub fn from_classes(a: i32, b: i32) -> Self {
        if a == b {
            PairLabel::Similar
        } else {
            PairLabel::Dissimilar
        }
    }

    pub fn value(self) -> u8 {
        self as u8
    }
}

impl From<PairLabel> for u8 {
    fn from(l: PairLabel) -> u8 {
        l.value()
    }
}

impl TryFrom<u8> for PairLabel {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, String> {
        match v {
            0 => Ok(PairLabel::Dissimilar),
            1 => Ok(PairLabel::Similar),
            other => Err(format!("pair label must be 0 or 1, got {other}")),
        }
    }
}

/// Regression target: the baseline similarity pushed up by `margin` for a
/// match and down by `margin` otherwise. Not clamped.
pub fn pair_target(sim: f64, label: PairLabel, margin: f64) -> f64 {
    match label {
        PairLabel::Similar => sim + margin,
        PairLabel::Dissimilar => sim - margin,
    }
}

/// `|s - (sim + margin)|` for a match, `|s - (sim - margin)|` otherwise.
pub fn pair_loss(score: f64, sim: f64, label: PairLabel, margin: f64) -> f64 {
    (score - pair_target(sim, label, margin)).abs()
}

/// d loss / d score. Zero exactly at the target.
pub fn pair_loss_grad(score: f64, sim: f64, label: PairLabel, margin: f64) -> f64 {
    let r = score - pair_target(sim, label, margin);
    if r > 0.0 {
        1.0
    } else if r < 0.0 {
        -1.0
    } else {
        0.0
    }
}
