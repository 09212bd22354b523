//! Rate of argumentation changes.
//!
//! For a review with sentence polarity labels `y₁ … yₙ`, RAC is the share of
//! adjacent pairs whose labels differ: `Σᵢ₌₂ⁿ I(yᵢ ≠ yᵢ₋₁) / (n − 1)`, and 0
//! for a single sentence.

use crate::error::{Error, Result};
use crate::mil::label_sentence;

#[derive(Debug, Clone, PartialEq)]
pub struct PolaritySequence {
    labels: Vec<u8>,
    probabilities: Option<Vec<f64>>,
}

impl PolaritySequence {
    pub fn from_labels(labels: Vec<u8>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::InvalidArgument("empty polarity sequence".into()));
        }
        if let Some(l) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::InvalidArgument(format!("non-binary label {l}")));
        }
        Ok(PolaritySequence {
            labels,
            probabilities: None,
        })
    }

    /// Thresholds at 0.5 (a probability of exactly 0.5 is positive).
    pub fn from_probabilities(probabilities: Vec<f64>) -> Result<Self> {
        if probabilities.is_empty() {
            return Err(Error::InvalidArgument("empty polarity sequence".into()));
        }
        let labels = probabilities
            .iter()
            .map(|&p| label_sentence(p))
            .collect::<Result<Vec<_>>>()?;
        Ok(PolaritySequence {
            labels,
            probabilities: Some(probabilities),
        })
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn probabilities(&self) -> Option<&[f64]> {
        self.probabilities.as_deref()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn rac_of(labels: &[u8]) -> f64 {
    if labels.len() < 2 {
        return 0.0;
    }
    let changes = labels.windows(2).filter(|w| w[0] != w[1]).count();
    changes as f64 / (labels.len() - 1) as f64
}

pub fn rac(sequence: &PolaritySequence) -> f64 {
    rac_of(&sequence.labels)
}

/// Convenience wrapper over raw labels.
pub fn rac_labels(labels: &[u8]) -> Result<f64> {
    Ok(rac(&PolaritySequence::from_labels(labels.to_vec())?))
}

/// Band of probabilities treated as neutral.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NeutralBand {
    pub lo: f64,
    pub hi: f64,
}

impl Default for NeutralBand {
    fn default() -> Self {
        NeutralBand { lo: 0.4, hi: 0.6 }
    }
}

impl NeutralBand {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        let band = NeutralBand { lo, hi };
        band.validate()?;
        Ok(band)
    }

    /// Requires `0 ≤ lo < 0.5 < hi ≤ 1`.
    pub fn validate(&self) -> Result<()> {
        if 0.0 <= self.lo && self.lo < 0.5 && 0.5 < self.hi && self.hi <= 1.0 {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "neutral band [{}, {}] must satisfy 0 <= lo < 0.5 < hi <= 1",
                self.lo, self.hi
            )))
        }
    }

    pub fn contains(&self, p: f64) -> bool {
        self.lo <= p && p <= self.hi
    }
}

/// RAC after dropping sentences whose probability falls inside `band`.
pub fn rac_neutral(probabilities: &[f64], band: NeutralBand) -> Result<f64> {
    band.validate()?;
    let kept = probabilities
        .iter()
        .filter(|&&p| !band.contains(p))
        .map(|&p| label_sentence(p))
        .collect::<Result<Vec<u8>>>()?;
    Ok(rac_of(&kept))
}

/// Review length in sentences.
pub fn review_length(review: &crate::corpus::Review) -> usize {
    review.sentences.len()
}
