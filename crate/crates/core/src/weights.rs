//! The distributional variable: per-pair weights with a flavor tag.

use crate::error::{Error, Result};
use crate::losses::PairLossMatrix;
use crate::pairs::PairSystem;

/// Which normalization the weight vector satisfies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightFlavor {
    /// Weights over all pairs sum to 1.
    GlobalSimplex,
    /// For each anchor, the positive-group and negative-group weights each
    /// sum to 1 (or to at most 1 when a slack element absorbs the rest).
    PerAnchor,
    /// Every weight is 0 or 1.
    BinarySelection,
}

/// A solved weight vector together with the robust-loss value it attains.
#[derive(Debug, Clone)]
pub struct WeightAssignment {
    pub weights: Vec<f64>,
    pub flavor: WeightFlavor,
    pub robust_value: f64,
    /// Set when a solver had to adjust its inputs (e.g. K capped).
    pub warning: Option<String>,
}

impl WeightAssignment {
    pub fn new(weights: Vec<f64>, flavor: WeightFlavor, robust_value: f64) -> Self {
        Self {
            weights,
            flavor,
            robust_value,
            warning: None,
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Pair indices carrying nonzero weight.
    pub fn support(&self) -> Vec<usize> {
        self.weights
            .iter()
            .enumerate()
            .filter(|(_, &w)| w != 0.0)
            .map(|(k, _)| k)
            .collect()
    }

    /// Number of selected pairs of a binary assignment.
    pub fn selected_count(&self) -> usize {
        self.weights.iter().filter(|&&w| w != 0.0).count()
    }

    /// Mean loss over the selected pairs of a binary assignment; falls back
    /// to the stored robust value for simplex flavors.
    pub fn mean_selected_loss(&self, losses: &PairLossMatrix) -> f64 {
        if self.flavor != WeightFlavor::BinarySelection {
            return self.robust_value;
        }
        let mut sum = 0.0;
        let mut count = 0usize;
        for (k, &w) in self.weights.iter().enumerate() {
            if w != 0.0 {
                sum += losses.loss(k);
                count += 1;
            }
        }
        if count == 0 {
            0.0
        } else {
            sum / count as f64
        }
    }

    /// Check the flavor invariant against a pair system.
    pub fn validate(&self, pairs: &PairSystem) -> Result<()> {
        if self.weights.len() != pairs.len() {
            return Err(Error::Shape(format!(
                "{} weights for {} pairs",
                self.weights.len(),
                pairs.len()
            )));
        }
        if self.weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
            return Err(Error::Config("weights must be finite and non-negative".into()));
        }
        match self.flavor {
            WeightFlavor::GlobalSimplex => {
                let sum: f64 = self.weights.iter().sum();
                if (sum - 1.0).abs() > 1e-9 {
                    return Err(Error::Config(format!(
                        "global-simplex weights sum to {sum}, expected 1"
                    )));
                }
            }
            WeightFlavor::PerAnchor => {
                for i in 0..pairs.batch_size() {
                    for group in [pairs.pos_group(i), pairs.neg_group(i)] {
                        let sum: f64 = group.iter().map(|&k| self.weights[k]).sum();
                        if sum > 1.0 + 1e-9 {
                            return Err(Error::Config(format!(
                                "anchor {i} group weights sum to {sum} > 1"
                            )));
                        }
                    }
                }
            }
            WeightFlavor::BinarySelection => {
                if self.weights.iter().any(|&w| w != 0.0 && w != 1.0) {
                    return Err(Error::Config(
                        "binary-selection weights must be 0 or 1".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}
