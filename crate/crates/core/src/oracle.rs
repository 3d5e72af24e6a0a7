//! Slow, independent maximizers and numerical differentiation.
//!
//! Everything here exists to cross-check the closed-form solvers through a
//! different computational route: projected ascent instead of softmax
//! algebra, exhaustive grids instead of dual bisection, central differences
//! instead of the analytic chain rule.

use crate::error::{Error, Result};

/// Regularizer added to the weighted loss during ascent.
#[derive(Debug, Clone, Copy)]
pub enum Regularizer {
    None,
    /// -gamma * KL(p || uniform)
    Kl { gamma: f64 },
}

/// Euclidean projection onto the probability simplex via the
/// sorted-threshold method.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("non-NaN weights"));
    let mut cumsum = 0.0;
    let mut tau = 0.0;
    for (j, &u) in sorted.iter().enumerate() {
        cumsum += u;
        let candidate = (cumsum - 1.0) / (j + 1) as f64;
        if u - candidate > 0.0 {
            tau = candidate;
        }
    }
    v.iter().map(|&x| (x - tau).max(0.0)).collect()
}

fn objective(p: &[f64], losses: &[f64], reg: Regularizer) -> f64 {
    let linear: f64 = p.iter().zip(losses).map(|(w, l)| w * l).sum();
    match reg {
        Regularizer::None => linear,
        Regularizer::Kl { gamma } => {
            let n = p.len() as f64;
            let kl: f64 = p
                .iter()
                .map(|&w| if w > 0.0 { w * (w * n).ln() } else { 0.0 })
                .sum();
            linear - gamma * kl
        }
    }
}

/// Default ascent step 0.5 / (max loss - min loss + gamma).
pub fn default_ascent_step(losses: &[f64], gamma: f64) -> f64 {
    let max = losses.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = losses.iter().cloned().fold(f64::INFINITY, f64::min);
    0.5 / (max - min + gamma).max(1e-9)
}

/// Projected gradient ascent on the simplex with 1/sqrt(t) step decay,
/// started from the uniform distribution.
///
/// Returns the best iterate seen. Declares failure if the objective falls
/// below its starting value and stays there for 100 iterations.
pub fn simplex_ascent(
    losses: &[f64],
    reg: Regularizer,
    iters: usize,
    step: f64,
) -> Result<(Vec<f64>, f64)> {
    if losses.is_empty() {
        return Err(Error::EmptyInput("ascent needs at least one loss".into()));
    }
    let uniform = vec![1.0 / losses.len() as f64; losses.len()];
    simplex_ascent_warm(losses, reg, iters, step, &uniform)
}

/// Projected gradient ascent from a caller-supplied feasible start.
pub fn simplex_ascent_warm(
    losses: &[f64],
    reg: Regularizer,
    iters: usize,
    step: f64,
    start: &[f64],
) -> Result<(Vec<f64>, f64)> {
    let n = losses.len();
    if n == 0 {
        return Err(Error::EmptyInput("ascent needs at least one loss".into()));
    }
    if n == 1 {
        return Ok((vec![1.0], objective(&[1.0], losses, reg)));
    }
    let mut p = start.to_vec();
    let mut best_p = p.clone();
    let mut best_f = objective(&p, losses, reg);
    let mut best_t = 0usize;
    // Coordinate i of the optimum can never fall below e^{(l_i - max)/gamma}/n.
    // Flooring the log argument there makes the inward pull on a zeroed
    // coordinate match the dual threshold instead of exceeding it, so
    // clipped coordinates stay cleanly at zero.
    let log_floors: Vec<f64> = match reg {
        Regularizer::None => vec![0.0; n],
        Regularizer::Kl { gamma } => {
            let max = losses.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            losses
                .iter()
                .map(|&l| (((l - max) / gamma).exp() / n as f64).max(1e-300))
                .collect()
        }
    };
    // divergence baseline: a healthy ascent stays above its start
    let start_f = best_f;
    let mut drifting = 0usize;
    for t in 1..=iters {
        let eta = step / (t as f64).sqrt();
        let moved: Vec<f64> = p
            .iter()
            .zip(losses)
            .enumerate()
            .map(|(i, (&w, &l))| {
                let g = match reg {
                    Regularizer::None => l,
                    Regularizer::Kl { gamma } => {
                        l - gamma * ((w.max(log_floors[i]) * n as f64).ln() + 1.0)
                    }
                };
                w + eta * g
            })
            .collect();
        p = project_simplex(&moved);
        let f = objective(&p, losses, reg);
        if f > best_f {
            best_f = f;
            best_p.copy_from_slice(&p);
            best_t = t;
        }
        // divergence: the value dropped below the starting point and
        // stayed there for 100 iterations (convergent runs oscillate
        // strictly above it once the early phase passes)
        if !f.is_finite() {
            return Err(Error::OracleFailure(format!(
                "objective became non-finite at iteration {t}"
            )));
        }
        if t > 200 && f < start_f - 1e-6 && t - best_t > 100 {
            drifting += 1;
            if drifting >= 100 {
                return Err(Error::OracleFailure(
                    "objective fell below its starting value and stayed there".into(),
                ));
            }
        } else {
            drifting = 0;
        }
    }
    Ok((best_p, best_f))
}

/// Staged ascent for the KL-regularized objective: a few gradient stages
/// with geometrically shrinking step bases discover the support, then a
/// damped diagonal-Newton polish on the optimality system drives the
/// value to machine precision. Both phases are generic constrained
/// optimization; neither evaluates the closed-form softmax.
pub fn simplex_ascent_refined(
    losses: &[f64],
    reg: Regularizer,
    tol: f64,
    step0: f64,
) -> Result<(Vec<f64>, f64)> {
    let n = losses.len();
    if n == 0 {
        return Err(Error::EmptyInput("ascent needs at least one loss".into()));
    }
    let mut p = vec![1.0 / n as f64; n];
    let mut best = f64::NEG_INFINITY;
    let mut step = step0;
    for _ in 0..2 {
        let (next_p, f) = simplex_ascent_warm(losses, reg, 25_000, step, &p)?;
        if f > best {
            best = f;
            p = next_p;
        }
        step /= 100.0;
    }
    if let Regularizer::Kl { gamma } = reg {
        let (polished, f) = newton_polish(&p, losses, gamma, tol);
        if f > best {
            best = f;
            p = polished;
        }
    }
    Ok((p, best))
}

/// Damped Newton ascent with the diagonal KL Hessian, staying on the
/// simplex by clipping and renormalizing. Multiplicative steps grow
/// under-weighted coordinates exponentially, so convergence near the
/// optimum is quadratic.
fn newton_polish(start: &[f64], losses: &[f64], gamma: f64, tol: f64) -> (Vec<f64>, f64) {
    let n = losses.len();
    let nf = n as f64;
    let max = losses.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let floors: Vec<f64> = losses
        .iter()
        .map(|&l| (((l - max) / gamma).exp() / nf).max(1e-300))
        .collect();
    let objective = |p: &[f64]| -> f64 {
        p.iter()
            .zip(losses)
            .map(|(&w, &l)| w * l - gamma * if w > 0.0 { w * (w * nf).ln() } else { 0.0 })
            .sum()
    };
    let mut p = start.to_vec();
    let mut f = objective(&p);
    for _ in 0..60 {
        let masses: Vec<f64> = p
            .iter()
            .zip(&floors)
            .map(|(&w, &fl)| w.max(fl))
            .collect();
        let grads: Vec<f64> = losses
            .iter()
            .zip(&masses)
            .map(|(&l, &m)| l - gamma * ((m * nf).ln() + 1.0))
            .collect();
        let mass_sum: f64 = masses.iter().sum();
        let nu: f64 = masses.iter().zip(&grads).map(|(m, g)| m * g).sum::<f64>() / mass_sum;
        let direction: Vec<f64> = masses
            .iter()
            .zip(&grads)
            .map(|(m, g)| m / gamma * (g - nu))
            .collect();
        let mut improved = false;
        let mut scale = 1.0;
        for _ in 0..40 {
            let mut cand: Vec<f64> = p
                .iter()
                .zip(&direction)
                .map(|(w, d)| (w + scale * d).max(0.0))
                .collect();
            let sum: f64 = cand.iter().sum();
            if sum > 0.0 {
                for w in &mut cand {
                    *w /= sum;
                }
                let fc = objective(&cand);
                if fc > f {
                    improved = fc - f > tol * 1e-3;
                    p = cand;
                    f = fc;
                    break;
                }
            }
            scale *= 0.5;
        }
        if !improved {
            break;
        }
    }
    (p, f)
}

/// Mean of the K largest losses by full sort.
pub fn topk_oracle(losses: &[f64], k: usize) -> f64 {
    let mut sorted = losses.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("non-NaN losses"));
    let k = k.min(sorted.len()).max(1);
    sorted[..k].iter().sum::<f64>() / k as f64
}

/// Squared scaled distance from uniform: sum (n p_i - 1)^2.
fn chi2_divergence(p: &[f64]) -> f64 {
    let n = p.len() as f64;
    p.iter().map(|&w| (n * w - 1.0).powi(2)).sum()
}

fn ball_project(p: &[f64], rho: f64) -> Vec<f64> {
    let n = p.len() as f64;
    let radius = (2.0 * rho).sqrt() / n;
    let dist: f64 = p
        .iter()
        .map(|&w| (w - 1.0 / n).powi(2))
        .sum::<f64>()
        .sqrt();
    if dist <= radius {
        return p.to_vec();
    }
    let scale = radius / dist;
    p.iter().map(|&w| 1.0 / n + (w - 1.0 / n) * scale).collect()
}

/// Dykstra's alternating projection onto (chi-square ball) `intersect`
/// (simplex). Converges to the Euclidean projection of `v`.
fn dykstra_project(v: &[f64], rho: f64, max_iter: usize) -> Vec<f64> {
    let n = v.len();
    let mut x = v.to_vec();
    let mut p_inc = vec![0.0; n];
    let mut q_inc = vec![0.0; n];
    for _ in 0..max_iter {
        let shifted: Vec<f64> = x.iter().zip(&p_inc).map(|(a, b)| a + b).collect();
        let y = ball_project(&shifted, rho);
        for i in 0..n {
            p_inc[i] = shifted[i] - y[i];
        }
        let shifted: Vec<f64> = y.iter().zip(&q_inc).map(|(a, b)| a + b).collect();
        let x_next = project_simplex(&shifted);
        let mut change = 0.0;
        for i in 0..n {
            q_inc[i] = shifted[i] - x_next[i];
            change += (x_next[i] - x[i]).abs();
        }
        x = x_next;
        if change < 1e-13 {
            break;
        }
    }
    x
}

/// Pull a simplex point inside the chi-square ball by shrinking toward
/// uniform; exact because the divergence scales quadratically.
fn shrink_into_ball(p: &[f64], rho: f64) -> Vec<f64> {
    let d = chi2_divergence(p);
    if d <= 2.0 * rho {
        return p.to_vec();
    }
    let t = (2.0 * rho / d).sqrt();
    let n = p.len() as f64;
    p.iter().map(|&w| 1.0 / n + (w - 1.0 / n) * t).collect()
}

/// Maximum of sum p_i l_i over the chi-square ball intersected with the
/// simplex: exhaustive grid for n <= 3, projected ascent with Dykstra
/// feasibility projection for larger n (`grid` then caps the iteration
/// budget).
pub fn chi2_oracle(losses: &[f64], rho: f64, grid: usize) -> f64 {
    let n = losses.len();
    match n {
        0 => 0.0,
        1 => losses[0],
        2 => {
            let g = grid.max(10);
            let mut best = f64::NEG_INFINITY;
            for step in 0..=g {
                let t = step as f64 / g as f64;
                let p = [t, 1.0 - t];
                if chi2_divergence(&p) <= 2.0 * rho {
                    best = best.max(p[0] * losses[0] + p[1] * losses[1]);
                }
            }
            best
        }
        3 => {
            let coarse = (grid as f64).sqrt().ceil() as usize;
            let coarse = coarse.clamp(50, 2000);
            let value = |a: f64, b: f64| -> Option<f64> {
                let c = 1.0 - a - b;
                if c < 0.0 {
                    return None;
                }
                let p = [a, b, c];
                if chi2_divergence(&p) <= 2.0 * rho {
                    Some(a * losses[0] + b * losses[1] + c * losses[2])
                } else {
                    None
                }
            };
            let mut best = f64::NEG_INFINITY;
            let mut best_ab = (1.0 / 3.0, 1.0 / 3.0);
            for ia in 0..=coarse {
                let a = ia as f64 / coarse as f64;
                for ib in 0..=(coarse - ia) {
                    let b = ib as f64 / coarse as f64;
                    if let Some(v) = value(a, b) {
                        if v > best {
                            best = v;
                            best_ab = (a, b);
                        }
                    }
                }
            }
            // refine around the coarse optimum
            let h = 1.0 / coarse as f64;
            let fine = 400usize;
            for ia in 0..=fine {
                let a = (best_ab.0 - h + 2.0 * h * ia as f64 / fine as f64).clamp(0.0, 1.0);
                for ib in 0..=fine {
                    let b = (best_ab.1 - h + 2.0 * h * ib as f64 / fine as f64).clamp(0.0, 1.0);
                    if let Some(v) = value(a, b) {
                        best = best.max(v);
                    }
                }
            }
            best
        }
        _ => {
            let iters = grid.clamp(500, 20_000);
            let nf = n as f64;
            let radius = (2.0 * rho).sqrt() / nf;
            let span = default_ascent_step(losses, 0.0);
            // keep single steps on the scale of the ball so the projection
            // does not dominate the direction
            let step = span.min(4.0 * radius);
            let mut p = vec![1.0 / nf; n];
            let mut best = shrink_into_ball(&p, rho)
                .iter()
                .zip(losses)
                .map(|(w, l)| w * l)
                .sum::<f64>();
            for t in 1..=iters {
                let eta = step / (t as f64).sqrt();
                let moved: Vec<f64> = p.iter().zip(losses).map(|(&w, &l)| w + eta * l).collect();
                p = dykstra_project(&moved, rho, 200);
                let feasible = shrink_into_ball(&p, rho);
                let f: f64 = feasible.iter().zip(losses).map(|(w, l)| w * l).sum();
                if f > best {
                    best = f;
                }
            }
            best
        }
    }
}

/// Central-difference gradient of `fun` at `theta`.
pub fn finite_diff_grad<F: Fn(&[f64]) -> f64>(fun: F, theta: &[f64], step: f64) -> Vec<f64> {
    let mut grad = Vec::with_capacity(theta.len());
    let mut probe = theta.to_vec();
    for i in 0..theta.len() {
        probe[i] = theta[i] + step;
        let up = fun(&probe);
        probe[i] = theta[i] - step;
        let down = fun(&probe);
        probe[i] = theta[i];
        grad.push((up - down) / (2.0 * step));
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projection_lands_on_simplex() {
        for v in [
            vec![0.5, 0.5],
            vec![2.0, -1.0, 0.3],
            vec![-5.0, -3.0, -1.0],
            vec![10.0, 10.0, 10.0, 10.0],
        ] {
            let p = project_simplex(&v);
            let sum: f64 = p.iter().sum();
            assert!((sum - 1.0).abs() < 1e-10);
            assert!(p.iter().all(|&w| w >= 0.0));
        }
    }

    #[test]
    fn projection_is_identity_on_simplex_points() {
        let v = vec![0.2, 0.3, 0.5];
        let p = project_simplex(&v);
        for (a, b) in v.iter().zip(&p) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_ascent_finds_the_vertex() {
        let losses = [0.9, 0.5];
        let (p, f) = simplex_ascent(&losses, Regularizer::None, 5000, 1.0).unwrap();
        assert!((f - 0.9).abs() < 1e-6);
        assert!(p[0] > 0.999);
    }

    #[test]
    fn kl_ascent_matches_grid_search() {
        // exhaustive 1e-4 grid over the 2-simplex
        let losses = [1.0, 0.0];
        let gamma = 1.0;
        let mut grid_best = f64::NEG_INFINITY;
        for step in 0..=10_000 {
            let t = step as f64 / 10_000.0;
            let p = [t, 1.0 - t];
            grid_best = grid_best.max(objective(&p, &losses, Regularizer::Kl { gamma }));
        }
        let (_, f) = simplex_ascent(
            &losses,
            Regularizer::Kl { gamma },
            20_000,
            default_ascent_step(&losses, gamma),
        )
        .unwrap();
        assert!((f - grid_best).abs() < 1e-7, "ascent {f} vs grid {grid_best}");
        // the closed-form optimum of this instance
        let expected = ((1.0_f64.exp() + 1.0) / 2.0).ln();
        assert!((f - expected).abs() < 1e-7);
        assert!((expected - 0.6201).abs() < 1e-4);
    }

    #[test]
    fn singleton_ascent() {
        let (p, _) = simplex_ascent(&[0.7], Regularizer::None, 10, 0.5).unwrap();
        assert_eq!(p, vec![1.0]);
    }

    #[test]
    fn ascent_output_stays_on_simplex() {
        let losses = [0.3, 0.9, 0.1, 0.5, 0.7];
        for reg in [Regularizer::None, Regularizer::Kl { gamma: 0.2 }] {
            let (p, f) = simplex_ascent(&losses, reg, 3000, 0.5).unwrap();
            let sum: f64 = p.iter().sum();
            assert!((sum - 1.0).abs() < 1e-10);
            // no weighted average (regularized or not) exceeds the max loss
            assert!(f <= 0.9 + 1e-9);
        }
    }

    #[test]
    fn topk_oracle_basics() {
        assert!((topk_oracle(&[0.9, 0.5, 0.1, 0.3], 2) - 0.7).abs() < 1e-12);
        assert!((topk_oracle(&[0.9, 0.5, 0.1], 1) - 0.9).abs() < 1e-12);
        assert!((topk_oracle(&[0.9, 0.5, 0.1], 3) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn chi2_two_point_instance() {
        let v = chi2_oracle(&[0.0, 1.0], 0.25, 100_000);
        assert!((v - 0.75).abs() < 1e-4);
    }

    #[test]
    fn chi2_ball_contains_vertex() {
        // n = 2, rho = n - 1: the vertex (0, 1) sits exactly on the ball
        let v = chi2_oracle(&[0.2, 0.9], 1.0, 100_000);
        assert!((v - 0.9).abs() < 1e-4);
    }

    #[test]
    fn chi2_constant_losses() {
        let v = chi2_oracle(&[0.4, 0.4, 0.4], 0.5, 10_000);
        assert!((v - 0.4).abs() < 1e-6);
    }

    #[test]
    fn chi2_large_n_matches_interior_closed_form() {
        // losses spread evenly: the unclipped solution stays non-negative,
        // so mean + sqrt(2 rho Var_n / n) is exact
        let n = 8;
        let losses: Vec<f64> = (0..n).map(|i| 0.4 + 0.02 * i as f64).collect();
        let rho = 0.1;
        let mean = losses.iter().sum::<f64>() / n as f64;
        let var = losses.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / n as f64;
        let expected = mean + (2.0 * rho * var / n as f64).sqrt();
        let v = chi2_oracle(&losses, rho, 5_000);
        assert!((v - expected).abs() < 1e-5, "oracle {v} vs closed form {expected}");
    }

    #[test]
    fn finite_diff_on_quadratic() {
        let theta = [0.3, -1.2, 0.8];
        let grad = finite_diff_grad(
            |t| 0.5 * t.iter().map(|x| x * x).sum::<f64>(),
            &theta,
            1e-5,
        );
        for (g, t) in grad.iter().zip(&theta) {
            assert!((g - t).abs() < 1e-8);
        }
    }

    #[test]
    fn finite_diff_on_constant() {
        let grad = finite_diff_grad(|_| 3.5, &[1.0, 2.0], 1e-5);
        assert!(grad.iter().all(|&g| g.abs() < 1e-12));
    }
}
