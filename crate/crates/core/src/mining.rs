//! Baseline pair-selection policies used for comparison experiments.
//!
//! All selectors return a binary weight assignment over the pair system;
//! the trainer turns the selection into uniform subgradient coefficients.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::batch::SimilarityMatrix;
use crate::error::{Error, Result};
use crate::losses::margin_loss;
use crate::pairs::PairSystem;
use crate::weights::{WeightAssignment, WeightFlavor};

/// Semihard selection simulated through the similarity threshold.
///
/// Keeps every positive pair with an active margin loss. Negatives are kept
/// when their similarity falls in (lambda - margin, lambda); anchors with
/// no negative in the band fall back to their hardest negative below
/// lambda. The value is the mean margin loss of the selection.
pub fn semihard_select(
    sim: &SimilarityMatrix,
    pairs: &PairSystem,
    lambda: f64,
    margin: f64,
) -> Result<WeightAssignment> {
    let mut weights = vec![0.0; pairs.len()];
    let mut sum = 0.0;
    let mut count = 0usize;
    let mut keep = |k: usize, loss: f64| {
        weights[k] = 1.0;
        sum += loss;
        count += 1;
    };
    for anchor in 0..pairs.batch_size() {
        for &k in pairs.pos_group(anchor) {
            let s = sim.get(anchor, pairs.pair(k).1);
            let (l, _) = margin_loss(s, 1, margin, lambda);
            if l > 0.0 {
                keep(k, l);
            }
        }
        let mut any_in_band = false;
        let mut hardest_below: Option<(usize, f64)> = None;
        for &k in pairs.neg_group(anchor) {
            let s = sim.get(anchor, pairs.pair(k).1);
            if s > lambda - margin && s < lambda {
                let (l, _) = margin_loss(s, -1, margin, lambda);
                keep(k, l);
                any_in_band = true;
            } else if s < lambda {
                match hardest_below {
                    Some((_, best)) if best >= s => {}
                    _ => hardest_below = Some((k, s)),
                }
            }
        }
        if !any_in_band {
            if let Some((k, s)) = hardest_below {
                let (l, _) = margin_loss(s, -1, margin, lambda);
                keep(k, l);
            }
        }
    }
    let value = if count == 0 { 0.0 } else { sum / count as f64 };
    Ok(WeightAssignment::new(
        weights,
        WeightFlavor::BinarySelection,
        value,
    ))
}

/// The spherical pairwise-distance density q(dist) up to a constant:
/// dist^(d-2) (1 - dist^2 / 4)^((d-3)/2).
fn distance_density(dist: f64, d: usize) -> f64 {
    let base = (1.0 - dist * dist / 4.0).max(0.0);
    dist.powi(d as i32 - 2) * base.powf((d as f64 - 3.0) / 2.0)
}

/// Distance-weighted sampling: keep all positives, sample
/// `count_per_anchor` negatives per anchor without replacement with
/// probability proportional to min(clip_tau, 1 / q(dist)), where
/// dist = sqrt(2 - 2 S). Deterministic given the seed.
pub fn dws_select(
    sim: &SimilarityMatrix,
    pairs: &PairSystem,
    d: usize,
    count_per_anchor: usize,
    clip_tau: f64,
    rng_seed: u64,
) -> Result<WeightAssignment> {
    if d < 3 {
        return Err(Error::Config(format!(
            "distance-weighted sampling needs dimension >= 3, got {d}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut weights = vec![0.0; pairs.len()];
    for anchor in 0..pairs.batch_size() {
        for &k in pairs.pos_group(anchor) {
            weights[k] = 1.0;
        }
        let neg = pairs.neg_group(anchor);
        if neg.is_empty() {
            continue;
        }
        if neg.len() <= count_per_anchor {
            for &k in neg {
                weights[k] = 1.0;
            }
            continue;
        }
        let mut probs: Vec<f64> = neg
            .iter()
            .map(|&k| {
                let s = sim.get(anchor, pairs.pair(k).1);
                let dist = (2.0 - 2.0 * s).max(0.0).sqrt();
                let q = distance_density(dist, d);
                if q < 1e-300 {
                    clip_tau
                } else {
                    (1.0 / q).min(clip_tau)
                }
            })
            .collect();
        let mut remaining: Vec<usize> = (0..neg.len()).collect();
        for _ in 0..count_per_anchor {
            let total: f64 = remaining.iter().map(|&i| probs[i]).sum();
            let r: f64 = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = remaining.len() - 1;
            for (pos, &i) in remaining.iter().enumerate() {
                acc += probs[i];
                if acc > r {
                    chosen = pos;
                    break;
                }
            }
            let i = remaining.swap_remove(chosen);
            weights[neg[i]] = 1.0;
            probs[i] = 0.0;
        }
    }
    Ok(WeightAssignment::new(
        weights,
        WeightFlavor::BinarySelection,
        0.0,
    ))
}

/// Pair mining in the multi-similarity style: per anchor, keep negatives
/// more similar than the least-similar positive minus epsilon, and
/// positives less similar than the most-similar negative plus epsilon.
/// Anchors missing the reference group keep the whole other side.
pub fn ms_mining_select(
    sim: &SimilarityMatrix,
    pairs: &PairSystem,
    epsilon: f64,
) -> Result<WeightAssignment> {
    let mut weights = vec![0.0; pairs.len()];
    for anchor in 0..pairs.batch_size() {
        let pos = pairs.pos_group(anchor);
        let neg = pairs.neg_group(anchor);
        let min_pos = pos
            .iter()
            .map(|&k| sim.get(anchor, pairs.pair(k).1))
            .fold(f64::INFINITY, f64::min);
        let max_neg = neg
            .iter()
            .map(|&k| sim.get(anchor, pairs.pair(k).1))
            .fold(f64::NEG_INFINITY, f64::max);
        for &k in neg {
            let s = sim.get(anchor, pairs.pair(k).1);
            if pos.is_empty() || s > min_pos - epsilon {
                weights[k] = 1.0;
            }
        }
        for &k in pos {
            let s = sim.get(anchor, pairs.pair(k).1);
            if neg.is_empty() || s < max_neg + epsilon {
                weights[k] = 1.0;
            }
        }
    }
    Ok(WeightAssignment::new(
        weights,
        WeightFlavor::BinarySelection,
        0.0,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::batch::{similarity, EmbeddingBatch};
    use crate::pairs::build_pair_system;
    use ndarray::Array2;

    /// A batch whose first example is the anchor of interest and whose
    /// cross similarities with it are exactly the given values.
    fn batch_with_similarities(sims: &[f64], labels: Vec<usize>) -> EmbeddingBatch {
        let b = sims.len() + 1;
        let mut raw = Array2::zeros((b, 2));
        raw[(0, 0)] = 1.0;
        for (i, &s) in sims.iter().enumerate() {
            raw[(i + 1, 0)] = s;
            raw[(i + 1, 1)] = (1.0 - s * s).max(0.0).sqrt();
        }
        EmbeddingBatch::from_raw(raw.clone(), raw, labels).unwrap()
    }

    #[test]
    fn semihard_band_membership() {
        // negatives of anchor 0 at S = 0.45, 0.1, 0.6 with band (0.3, 0.5)
        let batch = batch_with_similarities(&[0.45, 0.1, 0.6], vec![0, 1, 1, 1]);
        let sim = similarity(&batch).unwrap();
        let pairs = build_pair_system(&batch.labels, false).unwrap();
        let w = semihard_select(&sim, &pairs, 0.5, 0.2).unwrap();
        let selected_js: Vec<usize> = pairs
            .neg_group(0)
            .iter()
            .filter(|&&k| w.weights[k] == 1.0)
            .map(|&k| pairs.pair(k).1)
            .collect();
        assert_eq!(selected_js, vec![1], "only the 0.45 negative is in band");
    }

    #[test]
    fn semihard_fallback_when_all_above_lambda() {
        let batch = batch_with_similarities(&[0.7, 0.9], vec![0, 1, 1]);
        let sim = similarity(&batch).unwrap();
        let pairs = build_pair_system(&batch.labels, false).unwrap();
        let w = semihard_select(&sim, &pairs, 0.5, 0.2).unwrap();
        let any = pairs.neg_group(0).iter().any(|&k| w.weights[k] == 1.0);
        assert!(!any, "no negative below lambda, anchor contributes none");
    }

    #[test]
    fn semihard_fallback_hardest_below() {
        // both negatives below the band: pick the harder (closer) one
        let batch = batch_with_similarities(&[0.2, 0.25], vec![0, 1, 1]);
        let sim = similarity(&batch).unwrap();
        let pairs = build_pair_system(&batch.labels, false).unwrap();
        let w = semihard_select(&sim, &pairs, 0.5, 0.2).unwrap();
        let selected_js: Vec<usize> = pairs
            .neg_group(0)
            .iter()
            .filter(|&&k| w.weights[k] == 1.0)
            .map(|&k| pairs.pair(k).1)
            .collect();
        assert_eq!(selected_js, vec![2], "hardest below lambda is S = 0.25");
    }

    #[test]
    fn dws_equal_distances_equal_probability() {
        // two negatives at identical similarity: over many seeds the
        // selection frequencies match
        let batch = batch_with_similarities(&[0.4, 0.4], vec![0, 1, 1]);
        let sim = similarity(&batch).unwrap();
        let pairs = build_pair_system(&batch.labels, false).unwrap();
        let mut hits = [0usize; 2];
        for seed in 0..2000 {
            let w = dws_select(&sim, &pairs, 8, 1, 100.0, seed).unwrap();
            for (g, &k) in pairs.neg_group(0).iter().enumerate() {
                if w.weights[k] == 1.0 {
                    hits[g] += 1;
                }
            }
        }
        let ratio = hits[0] as f64 / (hits[0] + hits[1]) as f64;
        assert!((ratio - 0.5).abs() < 0.05, "ratio {ratio}");
    }

    #[test]
    fn dws_density_reduces_to_inverse_distance_at_d3() {
        // at d = 3 the density is proportional to dist, so the clipped
        // inverse weight is 1/dist
        let q1 = distance_density(0.5, 3);
        let q2 = distance_density(1.0, 3);
        assert!((q2 / q1 - 2.0).abs() < 1e-12);
    }

    #[test]
    fn dws_is_deterministic_and_takes_all_when_short() {
        let batch = batch_with_similarities(&[0.4, 0.1, 0.7], vec![0, 1, 1, 1]);
        let sim = similarity(&batch).unwrap();
        let pairs = build_pair_system(&batch.labels, false).unwrap();
        let a = dws_select(&sim, &pairs, 8, 2, 100.0, 5).unwrap();
        let b = dws_select(&sim, &pairs, 8, 2, 100.0, 5).unwrap();
        assert_eq!(a.weights, b.weights);
        // count_per_anchor >= N_i keeps every negative
        let all = dws_select(&sim, &pairs, 8, 3, 100.0, 5).unwrap();
        for &k in pairs.neg_group(0) {
            assert_eq!(all.weights[k], 1.0);
        }
    }

    #[test]
    fn dws_rejects_low_dimension() {
        let batch = batch_with_similarities(&[0.4], vec![0, 1]);
        let sim = similarity(&batch).unwrap();
        let pairs = build_pair_system(&batch.labels, false).unwrap();
        assert!(dws_select(&sim, &pairs, 2, 1, 100.0, 0).is_err());
    }

    #[test]
    fn ms_mining_epsilon_widens_selection() {
        // anchor 0: positive at S = 0.9, negatives at 0.85 and 0.2
        let batch = batch_with_similarities(&[0.9, 0.85, 0.2], vec![0, 0, 1, 1]);
        let sim = similarity(&batch).unwrap();
        let pairs = build_pair_system(&batch.labels, false).unwrap();

        let tight = ms_mining_select(&sim, &pairs, 0.0).unwrap();
        let anchor0: Vec<usize> = pairs
            .pos_group(0)
            .iter()
            .chain(pairs.neg_group(0))
            .filter(|&&k| tight.weights[k] == 1.0)
            .copied()
            .collect();
        assert!(anchor0.is_empty(), "epsilon 0 selects nothing for anchor 0");

        let wide = ms_mining_select(&sim, &pairs, 0.1).unwrap();
        let neg_js: Vec<usize> = pairs
            .neg_group(0)
            .iter()
            .filter(|&&k| wide.weights[k] == 1.0)
            .map(|&k| pairs.pair(k).1)
            .collect();
        assert_eq!(neg_js, vec![2], "0.85 > 0.9 - 0.1 selects that negative");
    }

    #[test]
    fn ms_mining_separated_batch_selects_nothing() {
        // positives all at 0.95, negatives all at 0.1, epsilon 0.2
        let batch = batch_with_similarities(&[0.95, 0.1, 0.05], vec![0, 0, 1, 1]);
        let sim = similarity(&batch).unwrap();
        let pairs = build_pair_system(&batch.labels, false).unwrap();
        let w = ms_mining_select(&sim, &pairs, 0.2).unwrap();
        let anchor0_any = pairs
            .pos_group(0)
            .iter()
            .chain(pairs.neg_group(0))
            .any(|&k| w.weights[k] == 1.0);
        assert!(!anchor0_any);
    }

    #[test]
    fn selectors_stay_within_pair_counts() {
        let batch = batch_with_similarities(&[0.8, 0.45, 0.3, 0.6], vec![0, 0, 1, 1, 2]);
        let sim = similarity(&batch).unwrap();
        let pairs = build_pair_system(&batch.labels, false).unwrap();
        for w in [
            semihard_select(&sim, &pairs, 0.5, 0.2).unwrap(),
            dws_select(&sim, &pairs, 8, 2, 100.0, 0).unwrap(),
            ms_mining_select(&sim, &pairs, 0.1).unwrap(),
        ] {
            w.validate(&pairs).unwrap();
            let pos_sel = (0..pairs.len())
                .filter(|&k| pairs.is_positive(k) && w.weights[k] == 1.0)
                .count();
            let neg_sel = (0..pairs.len())
                .filter(|&k| !pairs.is_positive(k) && w.weights[k] == 1.0)
                .count();
            assert!(pos_sel <= pairs.pos_count());
            assert!(neg_sel <= pairs.neg_count());
        }
    }

    #[test]
    fn semihard_is_permutation_invariant() {
        let raw = ndarray::array![
            [1.0, 0.0, 0.0],
            [0.6, 0.8, 0.0],
            [0.2, 0.5, 0.4],
            [-0.3, 0.8, 0.1],
            [0.45, 0.2, 0.7]
        ];
        let labels = vec![0, 0, 1, 1, 2];
        let batch = EmbeddingBatch::from_raw(raw.clone(), raw.clone(), labels.clone()).unwrap();
        let sim = similarity(&batch).unwrap();
        let pairs = build_pair_system(&labels, false).unwrap();
        let w = semihard_select(&sim, &pairs, 0.5, 0.2).unwrap();

        // permute examples and compare selections through the relabeling
        let perm = [3usize, 0, 4, 2, 1];
        let mut praw = Array2::zeros((5, 3));
        let mut plabels = vec![0usize; 5];
        for (new, &old) in perm.iter().enumerate() {
            for c in 0..3 {
                praw[(new, c)] = raw[(old, c)];
            }
            plabels[new] = labels[old];
        }
        let pbatch = EmbeddingBatch::from_raw(praw.clone(), praw, plabels.clone()).unwrap();
        let psim = similarity(&pbatch).unwrap();
        let ppairs = build_pair_system(&plabels, false).unwrap();
        let pw = semihard_select(&psim, &ppairs, 0.5, 0.2).unwrap();

        let mut inverse = [0usize; 5];
        for (new, &old) in perm.iter().enumerate() {
            inverse[old] = new;
        }
        for k in 0..pairs.len() {
            let (i, j) = pairs.pair(k);
            let mapped = ppairs
                .pairs()
                .iter()
                .position(|&(a, b)| a == inverse[i] && b == inverse[j])
                .unwrap();
            assert_eq!(w.weights[k], pw.weights[mapped], "pair ({i}, {j})");
        }
    }
}
