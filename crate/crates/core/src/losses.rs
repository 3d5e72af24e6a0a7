//! Pairwise base losses and their derivatives with respect to similarity.

use crate::batch::SimilarityMatrix;
use crate::config::{DroConfig, LossKind};
use crate::error::{Error, Result};
use crate::pairs::PairSystem;

/// Numerically stable log(1 + exp(x)).
fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic sigmoid, evaluated through the non-overflowing branch.
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Hinge margin loss l = [m + y (lambda - s)]_+ and its derivative in s.
///
/// The subgradient at the kink is 0; zero-loss pairs are pruned from the
/// active set before any weighting, so the choice never reaches a solver.
pub fn margin_loss(s: f64, y: i8, margin: f64, lambda: f64) -> (f64, f64) {
    let raw = margin + f64::from(y) * (lambda - s);
    if raw > 0.0 {
        (raw, -f64::from(y))
    } else {
        (0.0, 0.0)
    }
}

/// Binomial deviance loss: softplus with slope alpha (positive pairs) or
/// beta (negative pairs) around the threshold lambda, with a cost
/// multiplier on negatives.
pub fn binomial_loss(
    s: f64,
    y: i8,
    alpha: f64,
    beta: f64,
    lambda: f64,
    cost_neg: f64,
) -> (f64, f64) {
    if y > 0 {
        let loss = softplus(-alpha * (s - lambda)) / alpha;
        let dloss = -sigmoid(-alpha * (s - lambda));
        (loss, dloss)
    } else {
        let loss = cost_neg * softplus(beta * (s - lambda)) / beta;
        let dloss = cost_neg * sigmoid(beta * (s - lambda));
        (loss, dloss)
    }
}

/// Per-pair losses, loss-vs-similarity derivatives, and the active set.
#[derive(Debug, Clone)]
pub struct PairLossMatrix {
    loss: Vec<f64>,
    dloss_ds: Vec<f64>,
    active: Vec<usize>,
}

impl PairLossMatrix {
    pub fn from_parts(loss: Vec<f64>, dloss_ds: Vec<f64>) -> Self {
        let active = loss
            .iter()
            .enumerate()
            .filter(|(_, &l)| l > 0.0)
            .map(|(k, _)| k)
            .collect();
        Self {
            loss,
            dloss_ds,
            active,
        }
    }

    pub fn len(&self) -> usize {
        self.loss.len()
    }

    pub fn is_empty(&self) -> bool {
        self.loss.is_empty()
    }

    pub fn loss(&self, k: usize) -> f64 {
        self.loss[k]
    }

    pub fn losses(&self) -> &[f64] {
        &self.loss
    }

    pub fn dloss_ds(&self, k: usize) -> f64 {
        self.dloss_ds[k]
    }

    /// Pair indices with strictly positive loss, ascending.
    pub fn active(&self) -> &[usize] {
        &self.active
    }

    pub fn is_active(&self, k: usize) -> bool {
        self.loss[k] > 0.0
    }

    /// A copy whose active set covers every pair, bypassing zero-loss
    /// pruning (the `--keep-zero-loss` path).
    pub fn without_pruning(&self) -> Self {
        Self {
            loss: self.loss.clone(),
            dloss_ds: self.dloss_ds.clone(),
            active: (0..self.loss.len()).collect(),
        }
    }
}

/// Evaluate the chosen base loss on every pair of a batch.
pub fn loss_matrix(
    sim: &SimilarityMatrix,
    pairs: &PairSystem,
    cfg: &DroConfig,
    kind: LossKind,
) -> Result<PairLossMatrix> {
    if sim.size() != pairs.batch_size() {
        return Err(Error::Shape(format!(
            "similarity is {}x{} but the pair system was built over {} examples",
            sim.size(),
            sim.size(),
            pairs.batch_size()
        )));
    }
    let n = pairs.len();
    let mut loss = Vec::with_capacity(n);
    let mut dloss = Vec::with_capacity(n);
    for k in 0..n {
        let (i, j) = pairs.pair(k);
        let s = sim.get(i, j);
        let y = pairs.label(k);
        let (l, d) = match kind {
            LossKind::Margin => margin_loss(s, y, cfg.margin, cfg.lambda),
            LossKind::Binomial => {
                binomial_loss(s, y, cfg.alpha, cfg.beta, cfg.lambda, cfg.cost_neg)
            }
        };
        loss.push(l);
        dloss.push(d);
    }
    Ok(PairLossMatrix::from_parts(loss, dloss))
}
