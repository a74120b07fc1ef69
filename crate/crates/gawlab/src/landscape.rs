//! Discrete Q-landscapes: the finite stand-in for `Q(s, ·)` over an action set.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LandscapeError {
    #[error("landscape has no entries")]
    Empty,
    #[error("non-finite q value at entry {index}: {q}")]
    NonFiniteQ { index: usize, q: f64 },
    #[error("measure weight at entry {index} must be positive and finite, got {weight}")]
    BadMeasure { index: usize, weight: f64 },
    #[error("action_volume must be positive and finite, got {0}")]
    BadVolume(f64),
    #[error("measure length {measure} does not match entry count {entries}")]
    MeasureLength { measure: usize, entries: usize },
}

/// A finite set of (action, Q-value) pairs with a positive per-entry measure
/// weight and the total action volume used by the operator bounds.
///
/// The default constructor uses the uniform counting measure (every weight 1,
/// `action_volume` = number of entries), which is what every randomized test
/// suite in this crate consumes.
#[derive(Debug, Clone)]
pub struct QLandscape {
    actions: Vec<Vec<f64>>,
    qs: Vec<f64>,
    measure: Vec<f64>,
    action_volume: f64,
}

impl QLandscape {
    /// Landscape over anonymous actions with uniform counting measure.
    pub fn from_qs(qs: &[f64]) -> Result<Self, LandscapeError> {
        let actions = (0..qs.len()).map(|i| vec![i as f64]).collect();
        Self::new(actions, qs.to_vec(), vec![1.0; qs.len()], qs.len() as f64)
    }

    pub fn new(
        actions: Vec<Vec<f64>>,
        qs: Vec<f64>,
        measure: Vec<f64>,
        action_volume: f64,
    ) -> Result<Self, LandscapeError> {
        if qs.is_empty() {
            return Err(LandscapeError::Empty);
        }
        if measure.len() != qs.len() {
            return Err(LandscapeError::MeasureLength {
                measure: measure.len(),
                entries: qs.len(),
            });
        }
        for (index, &q) in qs.iter().enumerate() {
            if !q.is_finite() {
                return Err(LandscapeError::NonFiniteQ { index, q });
            }
        }
        for (index, &weight) in measure.iter().enumerate() {
            if !(weight.is_finite() && weight > 0.0) {
                return Err(LandscapeError::BadMeasure { index, weight });
            }
        }
        if !(action_volume.is_finite() && action_volume > 0.0) {
            return Err(LandscapeError::BadVolume(action_volume));
        }
        Ok(Self { actions, qs, measure, action_volume })
    }

    pub fn len(&self) -> usize {
        self.qs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.qs.is_empty()
    }

    pub fn qs(&self) -> &[f64] {
        &self.qs
    }

    pub fn actions(&self) -> &[Vec<f64>] {
        &self.actions
    }

    pub fn measure(&self) -> &[f64] {
        &self.measure
    }

    pub fn action_volume(&self) -> f64 {
        self.action_volume
    }

    pub fn max_q(&self) -> f64 {
        self.qs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min_q(&self) -> f64 {
        self.qs.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// max q - min q.
    pub fn spread(&self) -> f64 {
        self.max_q() - self.min_q()
    }

    /// Measure-weighted mean of the Q-values.
    pub fn mean_q(&self) -> f64 {
        let mut num = crate::operator::KahanSum::new();
        let mut den = crate::operator::KahanSum::new();
        for (&q, &w) in self.qs.iter().zip(&self.measure) {
            num.add(q * w);
            den.add(w);
        }
        num.value() / den.value()
    }
}
