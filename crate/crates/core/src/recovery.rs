//! Reference implementations of lifted-structure, multi-similarity, and
//! exponential point-to-set gradient weights.
//!
//! These are computed straight from each loss's own formula, on a separate
//! code path from the robust-loss solvers, so that the solver recoveries
//! can be checked numerically instead of taken on faith.

use std::fmt::Write as _;

use crate::batch::{similarity, EmbeddingBatch, SimilarityMatrix};
use crate::config::{DroConfig, DroVariant, LossKind};
use crate::dro;
use crate::error::{Error, Result};
use crate::losses::loss_matrix;
use crate::pairs::{build_pair_system, PairSystem};

/// Gradient weights for the positive and negative pair of every anchor,
/// keyed by pair index, plus the loss value of the recovered loss.
#[derive(Debug, Clone)]
pub struct RecoveredWeights {
    /// (pair index, weight) for positive pairs, anchors in order.
    pub w_pos: Vec<(usize, f64)>,
    /// (pair index, weight) for negative pairs, anchors in order.
    pub w_neg: Vec<(usize, f64)>,
    pub loss_value: f64,
}

impl RecoveredWeights {
    /// Dense weight vector aligned with the pair system.
    pub fn dense(&self, n_pairs: usize) -> Vec<f64> {
        let mut out = vec![0.0; n_pairs];
        for &(k, w) in self.w_pos.iter().chain(&self.w_neg) {
            out[k] = w;
        }
        out
    }

    /// Dense signed gradient coefficients: -w+ on positives, +w- on
    /// negatives.
    pub fn signed_coeffs(&self, n_pairs: usize) -> Vec<f64> {
        let mut out = vec![0.0; n_pairs];
        for &(k, w) in &self.w_pos {
            out[k] = -w;
        }
        for &(k, w) in &self.w_neg {
            out[k] = w;
        }
        out
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m.is_infinite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Lifted-structure gradient weights:
/// w+_ij = 1 / sum_k e^{S_ij - S_ik} over the anchor's positive group,
/// w-_ij = 1 / sum_k e^{S_ik - S_ij} over its negative group.
///
/// The loss value applies the outer per-anchor hinge; the weights are
/// reported from the unhinged expression, which is how the loss's gradient
/// is usually stated. Anchors with an empty group are omitted from the
/// weight maps.
pub fn ls_weights(
    sim: &SimilarityMatrix,
    pairs: &PairSystem,
    lambda: f64,
) -> RecoveredWeights {
    let mut w_pos = Vec::new();
    let mut w_neg = Vec::new();
    let mut loss_value = 0.0;
    for anchor in 0..pairs.batch_size() {
        let pos = pairs.pos_group(anchor);
        let neg = pairs.neg_group(anchor);
        if !pos.is_empty() {
            // softmax of -S over the group
            let logits: Vec<f64> = pos
                .iter()
                .map(|&k| -sim.get(anchor, pairs.pair(k).1))
                .collect();
            let lse = log_sum_exp(&logits);
            for (&k, &x) in pos.iter().zip(&logits) {
                w_pos.push((k, (x - lse).exp()));
            }
        }
        if !neg.is_empty() {
            let logits: Vec<f64> = neg
                .iter()
                .map(|&k| sim.get(anchor, pairs.pair(k).1))
                .collect();
            let lse = log_sum_exp(&logits);
            for (&k, &x) in neg.iter().zip(&logits) {
                w_neg.push((k, (x - lse).exp()));
            }
        }
        if !pos.is_empty() && !neg.is_empty() {
            let pos_term = log_sum_exp(
                &pos.iter()
                    .map(|&k| lambda - sim.get(anchor, pairs.pair(k).1))
                    .collect::<Vec<_>>(),
            );
            let neg_term = log_sum_exp(
                &neg.iter()
                    .map(|&k| sim.get(anchor, pairs.pair(k).1) - lambda)
                    .collect::<Vec<_>>(),
            );
            loss_value += (pos_term + neg_term).max(0.0);
        }
    }
    RecoveredWeights {
        w_pos,
        w_neg,
        loss_value,
    }
}

/// Multi-similarity gradient weights:
/// w+_ij = 1 / (e^{alpha (S_ij - lambda)} + sum_k e^{alpha (S_ij - S_ik)}),
/// w-_ij = 1 / (e^{beta (lambda - S_ij)} + sum_k e^{beta (S_ik - S_ij)}).
///
/// The loss value carries the 1/B prefactor of the loss definition; the
/// weights do not, matching the gradient expression they come from.
pub fn ms_weights(
    sim: &SimilarityMatrix,
    pairs: &PairSystem,
    alpha: f64,
    beta: f64,
    lambda: f64,
) -> RecoveredWeights {
    let b = pairs.batch_size();
    let mut w_pos = Vec::new();
    let mut w_neg = Vec::new();
    let mut loss_value = 0.0;
    for anchor in 0..b {
        let pos = pairs.pos_group(anchor);
        let neg = pairs.neg_group(anchor);
        if !pos.is_empty() {
            // w+_ij = e^{-alpha S_ij} / (e^{-alpha lambda} + sum_k e^{-alpha S_ik})
            let mut terms: Vec<f64> = vec![-alpha * lambda];
            terms.extend(pos.iter().map(|&k| -alpha * sim.get(anchor, pairs.pair(k).1)));
            let lse = log_sum_exp(&terms);
            for &k in pos {
                let s = sim.get(anchor, pairs.pair(k).1);
                w_pos.push((k, (-alpha * s - lse).exp()));
            }
            // (1/alpha) log(1 + sum_k e^{-alpha (S_ik - lambda)})
            let mut log_terms: Vec<f64> = vec![0.0];
            log_terms.extend(
                pos.iter()
                    .map(|&k| -alpha * (sim.get(anchor, pairs.pair(k).1) - lambda)),
            );
            loss_value += log_sum_exp(&log_terms) / alpha;
        }
        if !neg.is_empty() {
            let mut terms: Vec<f64> = vec![beta * lambda];
            terms.extend(neg.iter().map(|&k| beta * sim.get(anchor, pairs.pair(k).1)));
            let lse = log_sum_exp(&terms);
            for &k in neg {
                let s = sim.get(anchor, pairs.pair(k).1);
                w_neg.push((k, (beta * s - lse).exp()));
            }
            let mut log_terms: Vec<f64> = vec![0.0];
            log_terms.extend(
                neg.iter()
                    .map(|&k| beta * (sim.get(anchor, pairs.pair(k).1) - lambda)),
            );
            loss_value += log_sum_exp(&log_terms) / beta;
        }
    }
    RecoveredWeights {
        w_pos,
        w_neg,
        loss_value: loss_value / b as f64,
    }
}

/// Exponential point-to-set weights: per-group normalization of
/// q+_ij = e^{-S_ij / gamma} and q-_ij = e^{S_ij / gamma}.
pub fn hap2s_e_weights(
    sim: &SimilarityMatrix,
    pairs: &PairSystem,
    gamma: f64,
) -> Result<RecoveredWeights> {
    if gamma <= 0.0 {
        return Err(Error::Config(format!("gamma must be positive, got {gamma}")));
    }
    let mut w_pos = Vec::new();
    let mut w_neg = Vec::new();
    for anchor in 0..pairs.batch_size() {
        for (group, sign, out) in [
            (pairs.pos_group(anchor), -1.0, &mut w_pos),
            (pairs.neg_group(anchor), 1.0, &mut w_neg),
        ] {
            if group.is_empty() {
                continue;
            }
            let logits: Vec<f64> = group
                .iter()
                .map(|&k| sign * sim.get(anchor, pairs.pair(k).1) / gamma)
                .collect();
            let lse = log_sum_exp(&logits);
            for (&k, &x) in group.iter().zip(&logits) {
                out.push((k, (x - lse).exp()));
            }
        }
    }
    Ok(RecoveredWeights {
        w_pos,
        w_neg,
        loss_value: 0.0,
    })
}

/// Outcome of the three weight-equivalence checks on one batch.
#[derive(Debug, Clone)]
pub struct EquivalenceReport {
    /// All margin losses were positive, so the comparisons are meaningful.
    pub hinge_inactive: bool,
    pub ls_discrepancy: f64,
    pub ms_discrepancy: f64,
    pub hap2s_discrepancy: f64,
    pub tolerance: f64,
}

impl EquivalenceReport {
    pub fn passed(&self) -> bool {
        self.hinge_inactive
            && self.ls_discrepancy <= self.tolerance
            && self.ms_discrepancy <= self.tolerance
            && self.hap2s_discrepancy <= self.tolerance
    }

    /// Flat key=value serialization.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let status = if self.hinge_inactive { "ok" } else { "hinge-active" };
        writeln!(out, "status={status}").unwrap();
        writeln!(out, "tolerance={}", self.tolerance).unwrap();
        writeln!(out, "ls_discrepancy={}", self.ls_discrepancy).unwrap();
        writeln!(out, "ms_discrepancy={}", self.ms_discrepancy).unwrap();
        writeln!(out, "hap2s_discrepancy={}", self.hap2s_discrepancy).unwrap();
        writeln!(out, "pass={}", self.passed()).unwrap();
        out
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Run the three gradient-weight equivalences on one batch:
/// (a) grouped-KL at gamma 1 against the lifted-structure weights,
/// (b) the slack-element solver against the multi-similarity weights,
/// (c) grouped-KL at cfg.gamma against the exponential point-to-set
/// weights.
///
/// The margin in `cfg` must be large enough that every pair loss is
/// positive; otherwise the report carries hinge-active status instead of
/// meaningless discrepancies.
pub fn equivalence_report(batch: &EmbeddingBatch, cfg: &DroConfig) -> Result<EquivalenceReport> {
    let sim = similarity(batch)?;
    let pairs = build_pair_system(&batch.labels, false)?;
    let losses = loss_matrix(&sim, &pairs, cfg, LossKind::Margin)?;
    let tolerance = 1e-10;
    if losses.active().len() != pairs.len() {
        return Ok(EquivalenceReport {
            hinge_inactive: false,
            ls_discrepancy: f64::INFINITY,
            ms_discrepancy: f64::INFINITY,
            hap2s_discrepancy: f64::INFINITY,
            tolerance,
        });
    }
    let n = pairs.len();

    // (a) grouped-KL(1) signed coefficients against LS signed weights
    let grouped = dro::solve_kl_grouped(&losses, &pairs, 1.0, 1.0)?;
    let grouped_coeffs = dro::weighted_subgradient_coeffs(&grouped, &losses);
    let ls = ls_weights(&sim, &pairs, cfg.lambda);
    let ls_discrepancy = max_abs_diff(&grouped_coeffs, &ls.signed_coeffs(n));

    // (b) slack-element solver against MS weights; the slack thresholds
    // coincide at lambda so both sides use the same single threshold
    let ms_cfg = DroConfig {
        variant: DroVariant::MsRecovery,
        lambda: cfg.lambda,
        ..DroConfig::ms_recovery_tie(cfg.alpha, cfg.beta, cfg.lambda, 0.0)
    };
    let ms_solved = dro::solve_ms_recovery(&sim, &losses, &pairs, &ms_cfg)?;
    let ms = ms_weights(&sim, &pairs, cfg.alpha, cfg.beta, cfg.lambda);
    let ms_discrepancy = max_abs_diff(&ms_solved.weights, &ms.dense(n));

    // (c) grouped-KL(gamma) against the exponential point-to-set weights
    let grouped_g = dro::solve_kl_grouped(&losses, &pairs, cfg.gamma, cfg.gamma)?;
    let hap = hap2s_e_weights(&sim, &pairs, cfg.gamma)?;
    let hap2s_discrepancy = max_abs_diff(&grouped_g.weights, &hap.dense(n));

    Ok(EquivalenceReport {
        hinge_inactive: true,
        ls_discrepancy,
        ms_discrepancy,
        hap2s_discrepancy,
        tolerance,
    })
}
