//! Robust-loss solvers.
//!
//! Each solver maximizes the weighted pair loss over one uncertainty set
//! for the distributional variable and returns the optimal weights together
//! with the attained robust value. Apart from the plain average, every
//! solver operates on the active (positive-loss) pair set: zero-loss pairs
//! are pruned before any weight computation.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::batch::SimilarityMatrix;
use crate::config::{DroConfig, DroVariant};
use crate::error::{Error, Result};
use crate::losses::PairLossMatrix;
use crate::pairs::PairSystem;
use crate::weights::{WeightAssignment, WeightFlavor};

/// log(sum(exp(x))) with max subtraction.
fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m.is_infinite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Comparator ordering by loss descending, then pair index ascending.
fn harder_first(a: &(usize, f64), b: &(usize, f64)) -> std::cmp::Ordering {
    b.1.partial_cmp(&a.1)
        .expect("pair losses must not be NaN")
        .then(a.0.cmp(&b.0))
}

/// Keep the `k` hardest entries of `entries` in its prefix (O(n) selection;
/// ties broken by lowest pair index).
fn select_top_k(entries: &mut [(usize, f64)], k: usize) {
    if k > 0 && k < entries.len() {
        entries.select_nth_unstable_by(k - 1, harder_first);
    }
}

/// Uniform weights over every pair; the value is the plain mean loss.
pub fn solve_avg(losses: &PairLossMatrix) -> Result<WeightAssignment> {
    let n = losses.len();
    if n == 0 {
        return Err(Error::EmptyInput("no pairs to average over".into()));
    }
    let w = 1.0 / n as f64;
    let value = losses.losses().iter().sum::<f64>() / n as f64;
    Ok(WeightAssignment::new(
        vec![w; n],
        WeightFlavor::GlobalSimplex,
        value,
    ))
}

/// All weight on one maximal-loss pair (lowest index on ties).
pub fn solve_max(losses: &PairLossMatrix) -> Result<WeightAssignment> {
    let mut best: Option<(usize, f64)> = None;
    for &k in losses.active() {
        let l = losses.loss(k);
        if best.is_none_or(|(_, bl)| l > bl) {
            best = Some((k, l));
        }
    }
    let (k, value) =
        best.ok_or_else(|| Error::EmptyActiveSet("max over an empty active set".into()))?;
    let mut weights = vec![0.0; losses.len()];
    weights[k] = 1.0;
    Ok(WeightAssignment::new(
        weights,
        WeightFlavor::GlobalSimplex,
        value,
    ))
}

/// Uniform 1/K weights on the K largest active losses.
///
/// A K larger than the active set falls back to the whole active set and
/// records a warning.
pub fn solve_topk(losses: &PairLossMatrix, k: usize) -> Result<WeightAssignment> {
    if k == 0 {
        return Err(Error::Config("topk needs k >= 1".into()));
    }
    let active = losses.active();
    if active.is_empty() {
        return Err(Error::EmptyActiveSet("topk over an empty active set".into()));
    }
    let mut warning = None;
    let k_eff = if k > active.len() {
        warning = Some(format!(
            "k = {k} exceeds the {} active pairs; using all of them",
            active.len()
        ));
        active.len()
    } else {
        k
    };
    let mut entries: Vec<(usize, f64)> = active.iter().map(|&i| (i, losses.loss(i))).collect();
    select_top_k(&mut entries, k_eff);
    let selected = &mut entries[..k_eff];
    // summing in descending-loss order keeps the value bit-identical to a
    // full-sort evaluation
    selected.sort_unstable_by(harder_first);
    let mut weights = vec![0.0; losses.len()];
    let mut sum = 0.0;
    for &(idx, l) in selected.iter() {
        weights[idx] = 1.0 / k_eff as f64;
        sum += l;
    }
    let mut out = WeightAssignment::new(weights, WeightFlavor::GlobalSimplex, sum / k_eff as f64);
    out.warning = warning;
    Ok(out)
}

/// Binary selection of the K/2 hardest active positives and K/2 hardest
/// active negatives; either side short of K/2 contributes all it has.
pub fn solve_topk_pn(
    losses: &PairLossMatrix,
    pairs: &PairSystem,
    k: usize,
) -> Result<WeightAssignment> {
    if k < 2 || !k.is_multiple_of(2) {
        return Err(Error::Config(format!("topk-pn needs an even k >= 2, got {k}")));
    }
    let mut pos: Vec<(usize, f64)> = Vec::new();
    let mut neg: Vec<(usize, f64)> = Vec::new();
    for &idx in losses.active() {
        if pairs.is_positive(idx) {
            pos.push((idx, losses.loss(idx)));
        } else {
            neg.push((idx, losses.loss(idx)));
        }
    }
    if pos.is_empty() && neg.is_empty() {
        return Err(Error::EmptyActiveSet(
            "topk-pn over an empty active set".into(),
        ));
    }
    let half = k / 2;
    let take_pos = half.min(pos.len());
    let take_neg = half.min(neg.len());
    select_top_k(&mut pos, take_pos);
    select_top_k(&mut neg, take_neg);
    let mut weights = vec![0.0; losses.len()];
    let mut sum = 0.0;
    for &(idx, l) in pos[..take_pos].iter().chain(neg[..take_neg].iter()) {
        weights[idx] = 1.0;
        sum += l;
    }
    let count = take_pos + take_neg;
    Ok(WeightAssignment::new(
        weights,
        WeightFlavor::BinarySelection,
        sum / count as f64,
    ))
}

/// Softmax weights and the log-mean-exp value of a dense loss slice.
fn kl_core(losses: &[f64], gamma: f64) -> (Vec<f64>, f64) {
    let n = losses.len();
    let scaled: Vec<f64> = losses.iter().map(|l| l / gamma).collect();
    let lse = log_sum_exp(&scaled);
    let weights: Vec<f64> = scaled.iter().map(|x| (x - lse).exp()).collect();
    let value = gamma * (lse - (n as f64).ln());
    (weights, value)
}

/// KL-regularized weights over the active set: p* proportional to
/// exp(l / gamma), value gamma * log(mean(exp(l / gamma))).
pub fn solve_kl(losses: &PairLossMatrix, gamma: f64) -> Result<WeightAssignment> {
    if gamma <= 0.0 {
        return Err(Error::Config(format!("gamma must be positive, got {gamma}")));
    }
    let active = losses.active();
    if active.is_empty() {
        return Err(Error::EmptyActiveSet("kl over an empty active set".into()));
    }
    let dense: Vec<f64> = active.iter().map(|&k| losses.loss(k)).collect();
    let (w, value) = kl_core(&dense, gamma);
    let mut weights = vec![0.0; losses.len()];
    for (&k, &wk) in active.iter().zip(&w) {
        weights[k] = wk;
    }
    Ok(WeightAssignment::new(
        weights,
        WeightFlavor::GlobalSimplex,
        value,
    ))
}

fn chi2_divergence(p: &[f64]) -> f64 {
    let n = p.len() as f64;
    p.iter().map(|&w| (n * w - 1.0).powi(2)).sum()
}

/// Weights over a dense loss slice for the chi-square ball
/// sum (n p_i - 1)^2 <= 2 rho around uniform.
///
/// When the sign-unconstrained solution stays non-negative the value is the
/// exact variance identity mean + sqrt(2 rho Var_n / n); otherwise the dual
/// threshold is located by bisection and the clipped weights renormalized.
fn chi2_core(losses: &[f64], rho: f64) -> (Vec<f64>, f64) {
    let n = losses.len();
    let nf = n as f64;
    if n == 1 {
        return (vec![1.0], losses[0]);
    }
    let mean = losses.iter().sum::<f64>() / nf;
    let dev: Vec<f64> = losses.iter().map(|l| l - mean).collect();
    let dev_norm = dev.iter().map(|d| d * d).sum::<f64>().sqrt();
    if dev_norm == 0.0 {
        return (vec![1.0 / nf; n], mean);
    }

    // All mass on the argmax set if the ball is large enough to reach it.
    let max = losses.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let arg_max: Vec<usize> = (0..n).filter(|&i| losses[i] == max).collect();
    let mut vertex = vec![0.0; n];
    for &i in &arg_max {
        vertex[i] = 1.0 / arg_max.len() as f64;
    }
    if chi2_divergence(&vertex) <= 2.0 * rho {
        return (vertex, max);
    }

    // Interior: uniform plus a scaled deviation in the loss direction.
    let scale = (2.0 * rho).sqrt() / (nf * dev_norm);
    let interior: Vec<f64> = dev.iter().map(|d| 1.0 / nf + d * scale).collect();
    if interior.iter().all(|&w| w >= 0.0) {
        let var_n = dev_norm * dev_norm / nf;
        let value = mean + (2.0 * rho * var_n / nf).sqrt();
        return (interior, value);
    }

    // Clipped: p_i proportional to max(0, l_i - eta) with eta chosen so the
    // ball constraint is tight.
    let family = |eta: f64| -> Vec<f64> {
        let q: Vec<f64> = losses.iter().map(|&l| (l - eta).max(0.0)).collect();
        let z: f64 = q.iter().sum();
        if z <= 0.0 {
            vertex.clone()
        } else {
            q.iter().map(|&v| v / z).collect()
        }
    };
    let min = losses.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut lo = min;
    let mut hi = max;
    while hi - lo > 1e-12 {
        let mid = 0.5 * (lo + hi);
        if chi2_divergence(&family(mid)) > 2.0 * rho {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let p = family(lo);
    let value = p.iter().zip(losses).map(|(w, l)| w * l).sum();
    (p, value)
}

/// Chi-square-ball robust weights over the active set.
pub fn solve_chi2(losses: &PairLossMatrix, rho: f64) -> Result<WeightAssignment> {
    if rho <= 0.0 {
        return Err(Error::Config(format!("rho must be positive, got {rho}")));
    }
    let active = losses.active();
    if active.is_empty() {
        return Err(Error::EmptyActiveSet("chi2 over an empty active set".into()));
    }
    let dense: Vec<f64> = active.iter().map(|&k| losses.loss(k)).collect();
    let (w, value) = chi2_core(&dense, rho);
    let mut weights = vec![0.0; losses.len()];
    for (&k, &wk) in active.iter().zip(&w) {
        weights[k] = wk;
    }
    Ok(WeightAssignment::new(
        weights,
        WeightFlavor::GlobalSimplex,
        value,
    ))
}

/// Per-anchor KL-regularized weights: an independent softmax over each
/// anchor's active positives and active negatives.
///
/// Groups with no active member get all-zero weights. The robust value is
/// the grouped objective at the optimum, with each KL term referenced to
/// the uniform distribution over that group's active members.
pub fn solve_kl_grouped(
    losses: &PairLossMatrix,
    pairs: &PairSystem,
    gamma_pos: f64,
    gamma_neg: f64,
) -> Result<WeightAssignment> {
    if gamma_pos <= 0.0 || gamma_neg <= 0.0 {
        return Err(Error::Config(format!(
            "group gammas must be positive, got {gamma_pos} / {gamma_neg}"
        )));
    }
    let mut weights = vec![0.0; losses.len()];
    let mut value = 0.0;
    for anchor in 0..pairs.batch_size() {
        for (group, gamma) in [
            (pairs.pos_group(anchor), gamma_pos),
            (pairs.neg_group(anchor), gamma_neg),
        ] {
            let members: Vec<usize> = group
                .iter()
                .copied()
                .filter(|&k| losses.is_active(k))
                .collect();
            if members.is_empty() {
                continue;
            }
            let scaled: Vec<f64> = members.iter().map(|&k| losses.loss(k) / gamma).collect();
            let lse = log_sum_exp(&scaled);
            for (&k, &x) in members.iter().zip(&scaled) {
                weights[k] = (x - lse).exp();
            }
            value += gamma * (lse - (members.len() as f64).ln());
        }
    }
    Ok(WeightAssignment::new(weights, WeightFlavor::PerAnchor, value))
}

/// Per-anchor weights with one zero-loss slack element per group.
///
/// The closed form is evaluated directly in similarity space:
/// p+_ij = 1 / (e^{(S_ij - c+)/gamma+} + sum_k e^{(S_ij - S_ik)/gamma+})
/// over the full positive group (and symmetrically for negatives), so the
/// group sums stay strictly below 1 and the slack absorbs the remainder.
pub fn solve_ms_recovery(
    sim: &SimilarityMatrix,
    losses: &PairLossMatrix,
    pairs: &PairSystem,
    cfg: &DroConfig,
) -> Result<WeightAssignment> {
    if cfg.gamma_pos <= 0.0 || cfg.gamma_neg <= 0.0 {
        return Err(Error::Config(format!(
            "group gammas must be positive, got {} / {}",
            cfg.gamma_pos, cfg.gamma_neg
        )));
    }
    let mut weights = vec![0.0; losses.len()];
    let mut value = 0.0;
    for anchor in 0..pairs.batch_size() {
        for (group, gamma, threshold, positive) in [
            (pairs.pos_group(anchor), cfg.gamma_pos, cfg.c_pos, true),
            (pairs.neg_group(anchor), cfg.gamma_neg, cfg.c_neg, false),
        ] {
            if group.is_empty() {
                continue;
            }
            // log denominator shared by the whole group
            let mut terms: Vec<f64> = Vec::with_capacity(group.len() + 1);
            if positive {
                terms.push(-threshold / gamma);
                for &k in group {
                    let (_, j) = pairs.pair(k);
                    terms.push(-sim.get(anchor, j) / gamma);
                }
            } else {
                terms.push(threshold / gamma);
                for &k in group {
                    let (_, j) = pairs.pair(k);
                    terms.push(sim.get(anchor, j) / gamma);
                }
            }
            let lse = log_sum_exp(&terms);
            let mut group_sum = 0.0;
            let mut linear = 0.0;
            for &k in group {
                let (_, j) = pairs.pair(k);
                let s = sim.get(anchor, j);
                let logit = if positive { -s / gamma } else { s / gamma };
                let w = (logit - lse).exp();
                weights[k] = w;
                group_sum += w;
                linear += w * losses.loss(k);
            }
            // objective at these weights: weighted loss minus the KL of the
            // slack-augmented group distribution from uniform
            let g1 = (group.len() + 1) as f64;
            let mut kl = 0.0;
            for &k in group {
                let w = weights[k];
                if w > 0.0 {
                    kl += w * (w * g1).ln();
                }
            }
            let slack = (1.0 - group_sum).max(0.0);
            if slack > 0.0 {
                kl += slack * (slack * g1).ln();
            }
            value += linear - gamma * kl;
        }
    }
    Ok(WeightAssignment::new(weights, WeightFlavor::PerAnchor, value))
}

/// Multinomial pair sampling (with replacement) according to solved
/// weights; per-anchor flavors split the draw budget evenly across their
/// non-empty groups. Deterministic given the seed.
pub fn sample_pairs(
    w: &WeightAssignment,
    pairs: &PairSystem,
    count: usize,
    rng_seed: u64,
) -> Result<Vec<usize>> {
    if count == 0 {
        return Err(Error::Config("sample count must be >= 1".into()));
    }
    if w.flavor == WeightFlavor::BinarySelection {
        return Err(Error::Config(
            "sampling needs simplex-flavored weights, not a binary selection".into(),
        ));
    }
    let total: f64 = w.weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::EmptyActiveSet("all sampling weights are zero".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut draws = Vec::with_capacity(count);
    match w.flavor {
        WeightFlavor::GlobalSimplex => {
            let cum = cumulative(&w.weights);
            for _ in 0..count {
                draws.push(draw_index(&cum, &mut rng));
            }
        }
        WeightFlavor::PerAnchor => {
            let mut live: Vec<&[usize]> = Vec::new();
            for anchor in 0..pairs.batch_size() {
                for group in [pairs.pos_group(anchor), pairs.neg_group(anchor)] {
                    if group.iter().any(|&k| w.weights[k] > 0.0) {
                        live.push(group);
                    }
                }
            }
            let g = live.len();
            for (gi, group) in live.iter().enumerate() {
                let share = count / g + usize::from(gi < count % g);
                if share == 0 {
                    continue;
                }
                let local: Vec<f64> = group.iter().map(|&k| w.weights[k]).collect();
                let cum = cumulative(&local);
                for _ in 0..share {
                    let pick = draw_index(&cum, &mut rng);
                    draws.push(group[pick]);
                }
            }
        }
        WeightFlavor::BinarySelection => unreachable!(),
    }
    Ok(draws)
}

fn cumulative(weights: &[f64]) -> Vec<f64> {
    let mut cum = Vec::with_capacity(weights.len());
    let mut acc = 0.0;
    for &w in weights {
        acc += w;
        cum.push(acc);
    }
    cum
}

fn draw_index(cum: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let total = *cum.last().expect("non-empty weights");
    let r: f64 = rng.random::<f64>() * total;
    match cum.partition_point(|&c| c <= r) {
        i if i >= cum.len() => cum.len() - 1,
        i => i,
    }
}

/// Per-pair subgradient coefficients: p*_ij times the loss derivative in
/// similarity. Binary selections weigh every selected pair by one over the
/// number selected.
pub fn weighted_subgradient_coeffs(
    w: &WeightAssignment,
    losses: &PairLossMatrix,
) -> Vec<f64> {
    match w.flavor {
        WeightFlavor::BinarySelection => {
            let count = w.selected_count().max(1) as f64;
            w.weights
                .iter()
                .enumerate()
                .map(|(k, &sel)| {
                    if sel != 0.0 {
                        losses.dloss_ds(k) / count
                    } else {
                        0.0
                    }
                })
                .collect()
        }
        _ => w
            .weights
            .iter()
            .enumerate()
            .map(|(k, &wk)| wk * losses.dloss_ds(k))
            .collect(),
    }
}

/// Dispatch on the configured uncertainty set.
pub fn solve(
    sim: &SimilarityMatrix,
    losses: &PairLossMatrix,
    pairs: &PairSystem,
    cfg: &DroConfig,
) -> Result<WeightAssignment> {
    cfg.validate()?;
    match cfg.variant {
        DroVariant::Avg => solve_avg(losses),
        DroVariant::Max => solve_max(losses),
        DroVariant::TopK => solve_topk(losses, cfg.k),
        DroVariant::TopKPn => solve_topk_pn(losses, pairs, cfg.k),
        DroVariant::Kl => solve_kl(losses, cfg.gamma),
        DroVariant::Chi2 => solve_chi2(losses, cfg.rho),
        DroVariant::KlGrouped => solve_kl_grouped(losses, pairs, cfg.gamma_pos, cfg.gamma_neg),
        DroVariant::MsRecovery => solve_ms_recovery(sim, losses, pairs, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::PairLossMatrix;
    use crate::pairs::build_pair_system;

    fn matrix(losses: &[f64]) -> PairLossMatrix {
        PairLossMatrix::from_parts(losses.to_vec(), vec![0.0; losses.len()])
    }

    #[test]
    fn avg_over_all_pairs() {
        let w = solve_avg(&matrix(&[0.4, 0.0, 0.4, 0.0])).unwrap();
        assert!(w.weights.iter().all(|&x| (x - 0.25).abs() < 1e-15));
        assert!((w.robust_value - 0.2).abs() < 1e-15);
    }

    #[test]
    fn avg_singleton_and_zero() {
        let w = solve_avg(&matrix(&[0.7])).unwrap();
        assert_eq!(w.weights, vec![1.0]);
        assert_eq!(w.robust_value, 0.7);
        let z = solve_avg(&matrix(&[0.0, 0.0])).unwrap();
        assert_eq!(z.robust_value, 0.0);
        assert!(solve_avg(&matrix(&[])).is_err());
    }

    #[test]
    fn max_picks_largest() {
        let w = solve_max(&matrix(&[0.9, 0.5, 0.1])).unwrap();
        assert_eq!(w.robust_value, 0.9);
        assert_eq!(w.weights, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn max_tie_goes_to_lowest_index() {
        let w = solve_max(&matrix(&[0.9, 0.9])).unwrap();
        assert_eq!(w.weights, vec![1.0, 0.0]);
    }

    #[test]
    fn max_needs_active_pairs() {
        assert!(matches!(
            solve_max(&matrix(&[0.0, 0.0])),
            Err(Error::EmptyActiveSet(_))
        ));
    }

    #[test]
    fn topk_examples() {
        let m = matrix(&[0.9, 0.5, 0.1, 0.3]);
        let w = solve_topk(&m, 2).unwrap();
        assert!((w.robust_value - 0.7).abs() < 1e-15);
        assert_eq!(w.weights, vec![0.5, 0.5, 0.0, 0.0]);

        // K = |active| reduces to the mean over active pairs
        let w_all = solve_topk(&m, 4).unwrap();
        assert!((w_all.robust_value - 0.45).abs() < 1e-15);

        // K = 1 reduces to the max
        let w1 = solve_topk(&m, 1).unwrap();
        assert_eq!(w1.robust_value, solve_max(&m).unwrap().robust_value);
    }

    #[test]
    fn topk_fallback_and_errors() {
        let m = matrix(&[0.9, 0.5]);
        let w = solve_topk(&m, 10).unwrap();
        assert!(w.warning.is_some());
        assert!((w.robust_value - 0.7).abs() < 1e-15);
        assert!(matches!(solve_topk(&m, 0), Err(Error::Config(_))));
    }

    /// labels [0,0,1]: pairs (0,1)+ (0,2)- (1,0)+ (1,2)- (2,0)- (2,1)-
    fn pn_fixture(losses: &[f64; 6]) -> (PairLossMatrix, crate::pairs::PairSystem) {
        let pairs = build_pair_system(&[0, 0, 1], false).unwrap();
        (matrix(losses), pairs)
    }

    #[test]
    fn topk_pn_balances_sides() {
        // positives {0.4, 0.1}, negatives {0.9, 0.5, 0.3, 0.0}
        let (m, pairs) = pn_fixture(&[0.4, 0.9, 0.1, 0.5, 0.3, 0.0]);
        let w = solve_topk_pn(&m, &pairs, 4).unwrap();
        assert_eq!(w.support(), vec![0, 1, 2, 3]);
        assert!((w.robust_value - (0.4 + 0.1 + 0.9 + 0.5) / 4.0).abs() < 1e-15);
    }

    #[test]
    fn topk_pn_hardest_each_side() {
        let (m, pairs) = pn_fixture(&[0.4, 0.9, 0.1, 0.5, 0.3, 0.0]);
        let w = solve_topk_pn(&m, &pairs, 2).unwrap();
        assert_eq!(w.support(), vec![0, 1]);
    }

    #[test]
    fn topk_pn_caps_short_side() {
        // only one active positive
        let (m, pairs) = pn_fixture(&[0.4, 0.9, 0.0, 0.5, 0.3, 0.0]);
        let w = solve_topk_pn(&m, &pairs, 4).unwrap();
        assert_eq!(w.selected_count(), 3);
        assert_eq!(w.support(), vec![0, 1, 3]);
    }

    #[test]
    fn topk_pn_rejects_odd_k() {
        let (m, pairs) = pn_fixture(&[0.4, 0.9, 0.1, 0.5, 0.3, 0.0]);
        assert!(solve_topk_pn(&m, &pairs, 3).is_err());
    }

    #[test]
    fn kl_two_point_closed_form() {
        let m = matrix(&[1.0, 0.0]).without_pruning();
        let w = solve_kl(&m, 1.0).unwrap();
        let e = 1.0_f64.exp();
        assert!((w.weights[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((w.weights[1] - 1.0 / (e + 1.0)).abs() < 1e-12);
        assert!((w.robust_value - ((e + 1.0) / 2.0).ln()).abs() < 1e-12);
        assert!((w.weights[0] - 0.7311).abs() < 1e-4);
        assert!((w.robust_value - 0.6201).abs() < 1e-4);
    }

    #[test]
    fn kl_uniform_on_equal_losses() {
        let m = matrix(&[0.3, 0.3, 0.3]);
        let w = solve_kl(&m, 0.5).unwrap();
        assert!(w.weights.iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-12));
    }

    #[test]
    fn kl_huge_gamma_approaches_uniform() {
        let m = matrix(&[0.9, 0.1, 0.5]);
        let w = solve_kl(&m, 1e6).unwrap();
        for &x in &w.weights {
            assert!((x - 1.0 / 3.0).abs() <= 1e-5);
        }
    }

    #[test]
    fn kl_rejects_bad_gamma() {
        assert!(solve_kl(&matrix(&[0.5]), 0.0).is_err());
    }

    #[test]
    fn chi2_two_point_instance() {
        let m = matrix(&[0.0, 1.0]).without_pruning();
        let w = solve_chi2(&m, 0.25).unwrap();
        assert!((w.robust_value - 0.75).abs() < 1e-12);
        assert!((w.weights[0] - 0.25).abs() < 1e-12);
        assert!((w.weights[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn chi2_constant_losses() {
        let m = matrix(&[0.4, 0.4, 0.4]);
        for rho in [0.01, 0.25, 10.0] {
            let w = solve_chi2(&m, rho).unwrap();
            assert!((w.robust_value - 0.4).abs() < 1e-15);
        }
    }

    #[test]
    fn chi2_tiny_rho_gives_mean() {
        let m = matrix(&[0.2, 0.9, 0.4]);
        let w = solve_chi2(&m, 1e-14).unwrap();
        assert!((w.robust_value - 0.5).abs() < 1e-6);
    }

    #[test]
    fn chi2_identity_on_interior_solutions() {
        let losses = [0.41, 0.47, 0.53, 0.59];
        let m = matrix(&losses);
        let rho = 0.05;
        let w = solve_chi2(&m, rho).unwrap();
        assert!(w.weights.iter().all(|&x| x > 0.0));
        let mean = losses.iter().sum::<f64>() / 4.0;
        let var = losses.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / 4.0;
        assert!((w.robust_value - (mean + (2.0 * rho * var / 4.0).sqrt())).abs() < 1e-12);
    }

    #[test]
    fn grouped_kl_softmax_of_losses() {
        // one anchor with two positive pairs at S = 0.9 and S = 0.5;
        // margin large enough that both hinges are active
        let pairs = build_pair_system(&[0, 0, 0], false).unwrap();
        // pairs: (0,1)+ (0,2)+ (1,0)+ (1,2)+ (2,0)+ (2,1)+
        let s01 = 0.9;
        let s02 = 0.5;
        let m = 3.0;
        let lambda = 0.5;
        let losses = vec![
            m + lambda - s01,
            m + lambda - s02,
            m + lambda - s01,
            m + lambda - 0.7,
            m + lambda - s02,
            m + lambda - 0.7,
        ];
        let lm = PairLossMatrix::from_parts(losses, vec![-1.0; 6]);
        let w = solve_kl_grouped(&lm, &pairs, 1.0, 1.0).unwrap();
        let expected0 = 1.0 / (1.0 + (0.4_f64).exp());
        assert!((w.weights[0] - expected0).abs() < 1e-12);
        assert!((w.weights[1] - (1.0 - expected0)).abs() < 1e-12);
        assert!((w.weights[0] - 0.4013).abs() < 1e-4);
        assert!((w.weights[1] - 0.5987).abs() < 1e-4);
    }

    #[test]
    fn grouped_kl_uniform_within_group() {
        let pairs = build_pair_system(&[0, 0, 0], false).unwrap();
        let lm = PairLossMatrix::from_parts(vec![0.7; 6], vec![-1.0; 6]);
        let w = solve_kl_grouped(&lm, &pairs, 0.3, 0.3).unwrap();
        assert!(w.weights.iter().all(|&x| (x - 0.5).abs() < 1e-12));
    }

    #[test]
    fn grouped_kl_skips_inactive_groups() {
        let pairs = build_pair_system(&[0, 0, 1], false).unwrap();
        // all negative pairs inactive
        let lm = PairLossMatrix::from_parts(
            vec![0.4, 0.0, 0.2, 0.0, 0.0, 0.0],
            vec![0.0; 6],
        );
        let w = solve_kl_grouped(&lm, &pairs, 1.0, 1.0).unwrap();
        assert_eq!(w.support(), vec![0, 2]);
        assert_eq!(w.weights[0], 1.0);
        assert_eq!(w.weights[2], 1.0);
    }

    /// One anchor with a single positive pair; similarity is controlled
    /// through two-dimensional unit vectors.
    fn ms_fixture(s01: f64) -> (crate::batch::SimilarityMatrix, crate::pairs::PairSystem) {
        let raw = ndarray::array![
            [1.0, 0.0],
            [s01, (1.0 - s01 * s01).max(0.0).sqrt()],
            [-1.0, 0.0]
        ];
        let batch = crate::batch::EmbeddingBatch::from_raw(raw.clone(), raw, vec![0, 0, 1])
            .unwrap();
        let sim = crate::batch::similarity(&batch).unwrap();
        let pairs = build_pair_system(&[0, 0, 1], false).unwrap();
        (sim, pairs)
    }

    #[test]
    fn ms_recovery_weight_half_at_slack_threshold() {
        // S equal to c+ makes the slack term e^0: denominator 1 + 1
        let (sim, pairs) = ms_fixture(0.7);
        let cfg = DroConfig {
            variant: DroVariant::MsRecovery,
            c_pos: 0.7,
            gamma_pos: 0.37,
            ..DroConfig::default()
        };
        let losses = PairLossMatrix::from_parts(vec![0.1; 6], vec![0.0; 6]);
        let w = solve_ms_recovery(&sim, &losses, &pairs, &cfg).unwrap();
        let k = pairs.pos_group(0)[0];
        assert!((w.weights[k] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn ms_recovery_hard_positive_takes_all_mass() {
        // a very dissimilar positive drives its weight to 1, slack to 0
        let (sim, pairs) = ms_fixture(-1.0);
        let cfg = DroConfig {
            variant: DroVariant::MsRecovery,
            c_pos: 5.0,
            gamma_pos: 0.1,
            ..DroConfig::default()
        };
        let losses = PairLossMatrix::from_parts(vec![0.1; 6], vec![0.0; 6]);
        let w = solve_ms_recovery(&sim, &losses, &pairs, &cfg).unwrap();
        let k = pairs.pos_group(0)[0];
        assert!(w.weights[k] > 1.0 - 1e-12);
        assert!(w.weights[k] <= 1.0);
    }

    #[test]
    fn sampling_degenerate_distribution() {
        let pairs = build_pair_system(&[0, 1], false).unwrap();
        let w = WeightAssignment::new(vec![1.0, 0.0], WeightFlavor::GlobalSimplex, 0.0);
        for seed in [0, 1, 42] {
            let draws = sample_pairs(&w, &pairs, 20, seed).unwrap();
            assert!(draws.iter().all(|&k| k == 0));
        }
    }

    #[test]
    fn sampling_uniform_frequencies() {
        let pairs = build_pair_system(&[0, 1], true).unwrap();
        let n = pairs.len();
        let w = WeightAssignment::new(vec![0.25; n], WeightFlavor::GlobalSimplex, 0.0);
        let count = 100_000;
        let draws = sample_pairs(&w, &pairs, count, 7).unwrap();
        let mut freq = vec![0usize; n];
        for k in draws {
            freq[k] += 1;
        }
        for f in freq {
            assert!((f as f64 / count as f64 - 0.25).abs() < 0.01);
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let pairs = build_pair_system(&[0, 1], true).unwrap();
        let w = WeightAssignment::new(vec![0.1, 0.2, 0.3, 0.4], WeightFlavor::GlobalSimplex, 0.0);
        let a = sample_pairs(&w, &pairs, 1000, 99).unwrap();
        let b = sample_pairs(&w, &pairs, 1000, 99).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sampling_splits_count_across_anchor_groups() {
        // labels [0,0,1]: anchors 0 and 1 each have one positive pair and
        // one negative pair, anchor 2 has two negatives
        let pairs = build_pair_system(&[0, 0, 1], false).unwrap();
        let mut weights = vec![0.0; 6];
        for anchor in 0..3 {
            for group in [pairs.pos_group(anchor), pairs.neg_group(anchor)] {
                for &k in group {
                    weights[k] = 1.0 / group.len() as f64;
                }
            }
        }
        let w = WeightAssignment::new(weights, WeightFlavor::PerAnchor, 0.0);
        // 5 live groups, 10 draws: exactly 2 per group
        let draws = sample_pairs(&w, &pairs, 10, 3).unwrap();
        assert_eq!(draws.len(), 10);
        for anchor in 0..3 {
            for group in [pairs.pos_group(anchor), pairs.neg_group(anchor)] {
                if !group.is_empty() {
                    let hits = draws.iter().filter(|k| group.contains(k)).count();
                    assert_eq!(hits, 2, "anchor group {group:?}");
                }
            }
        }
    }

    #[test]
    fn sampling_rejects_zero_weights() {
        let pairs = build_pair_system(&[0, 1], false).unwrap();
        let w = WeightAssignment::new(vec![0.0, 0.0], WeightFlavor::GlobalSimplex, 0.0);
        assert!(matches!(
            sample_pairs(&w, &pairs, 5, 0),
            Err(Error::EmptyActiveSet(_))
        ));
    }

    #[test]
    fn subgradient_coefficients() {
        let lm = PairLossMatrix::from_parts(vec![0.4, 0.0], vec![-1.0, 0.0]);
        let w = WeightAssignment::new(vec![0.4, 0.6], WeightFlavor::GlobalSimplex, 0.0);
        let coeffs = weighted_subgradient_coeffs(&w, &lm);
        assert!((coeffs[0] + 0.4).abs() < 1e-15);
        assert_eq!(coeffs[1], 0.0);
    }

    #[test]
    fn subgradient_binary_divides_by_count() {
        let lm = PairLossMatrix::from_parts(vec![0.4, 0.5, 0.1], vec![-1.0, 1.0, 1.0]);
        let w = WeightAssignment::new(vec![1.0, 1.0, 0.0], WeightFlavor::BinarySelection, 0.0);
        let coeffs = weighted_subgradient_coeffs(&w, &lm);
        assert!((coeffs[0] + 0.5).abs() < 1e-15);
        assert!((coeffs[1] - 0.5).abs() < 1e-15);
        assert_eq!(coeffs[2], 0.0);
    }
}
