//! The `verify` subcommand: numerical checks that the closed-form solvers,
//! the recovered weightings, and the analytic gradients agree with their
//! independent counterparts.

use drodml::batch::{similarity, EmbeddingBatch};
use drodml::config::{DroConfig, DroVariant, LossKind};
use drodml::dro;
use drodml::losses::{loss_matrix, PairLossMatrix};
use drodml::model::{backward, forward, EmbeddingModel};
use drodml::oracle::{
    chi2_oracle, default_ascent_step, finite_diff_grad, simplex_ascent_refined, topk_oracle,
    Regularizer,
};
use drodml::pairs::build_pair_system;
use drodml::recovery::equivalence_report;
use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub struct CheckRow {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn row(name: &str, passed: bool, detail: String) -> CheckRow {
    CheckRow {
        name: name.to_string(),
        passed,
        detail,
    }
}

fn random_batch(rng: &mut ChaCha8Rng, b: usize, d: usize, classes: usize) -> EmbeddingBatch {
    let raw = Array2::from_shape_fn((b, d), |_| rng.random::<f64>() * 2.0 - 1.0);
    let labels: Vec<usize> = (0..b).map(|i| i % classes).collect();
    EmbeddingBatch::from_raw(raw.clone(), raw, labels).expect("valid batch")
}

/// Closed-form solvers against the oracle maximizers.
pub fn oracle_suite(seed: u64, vectors: usize) -> Vec<CheckRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();

    let mut kl_worst: f64 = 0.0;
    let mut topk_exact = true;
    let mut chi2_worst: f64 = 0.0;
    for trial in 0..vectors {
        let n = [5usize, 16, 64][trial % 3];
        let losses: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let matrix = PairLossMatrix::from_parts(losses.clone(), vec![0.0; n]);
        for gamma in [0.01, 0.1, 1.0] {
            let solved = dro::solve_kl(&matrix, gamma).expect("kl solve");
            let step = default_ascent_step(&losses, gamma);
            let (_, f) = simplex_ascent_refined(&losses, Regularizer::Kl { gamma }, 1e-12, step)
                .expect("ascent");
            kl_worst = kl_worst.max((f - solved.robust_value).abs());
        }
        for k in [1, n / 2, n] {
            let k = k.max(1);
            let solved = dro::solve_topk(&matrix, k).expect("topk solve");
            if solved.robust_value != topk_oracle(&losses, k) {
                topk_exact = false;
            }
        }
        for rho in [0.05, 0.25, 1.0] {
            let solved = dro::solve_chi2(&matrix, rho).expect("chi2 solve");
            let oracle = chi2_oracle(&losses, rho, 3000);
            chi2_worst = chi2_worst.max((oracle - solved.robust_value).abs());
        }
    }
    rows.push(row(
        "kl-vs-ascent",
        kl_worst < 1e-8,
        format!("max |value diff| = {kl_worst:.3e} (tol 1e-8)"),
    ));
    rows.push(row(
        "topk-vs-sort",
        topk_exact,
        "values bit-identical to the sort oracle".to_string(),
    ));
    rows.push(row(
        "chi2-vs-ascent",
        chi2_worst < 1e-4,
        format!("max |value diff| = {chi2_worst:.3e} (tol 1e-4)"),
    ));
    rows
}

/// The three gradient-weight recoveries at tolerance 1e-10.
pub fn recovery_suite(seed: u64, batches: usize) -> Vec<CheckRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0001);
    let mut worst_ls: f64 = 0.0;
    let mut worst_ms: f64 = 0.0;
    let mut worst_hap: f64 = 0.0;
    let mut all_ok = true;
    for _ in 0..batches {
        let batch = random_batch(&mut rng, 8, 4, 3);
        let cfg = DroConfig {
            margin: 3.0,
            gamma: 0.5,
            ..DroConfig::default()
        };
        let report = equivalence_report(&batch, &cfg).expect("report");
        all_ok &= report.passed();
        worst_ls = worst_ls.max(report.ls_discrepancy);
        worst_ms = worst_ms.max(report.ms_discrepancy);
        worst_hap = worst_hap.max(report.hap2s_discrepancy);
    }
    vec![
        row(
            "ls-recovery",
            all_ok && worst_ls <= 1e-10,
            format!("max discrepancy {worst_ls:.3e} (tol 1e-10)"),
        ),
        row(
            "ms-recovery",
            all_ok && worst_ms <= 1e-10,
            format!("max discrepancy {worst_ms:.3e} (tol 1e-10)"),
        ),
        row(
            "hap2s-recovery",
            all_ok && worst_hap <= 1e-10,
            format!("max discrepancy {worst_hap:.3e} (tol 1e-10)"),
        ),
    ]
}

/// Analytic backward pass against central differences, with the solved
/// weights frozen.
pub fn gradient_suite(seed: u64, trials: usize) -> Vec<CheckRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0002);
    let variants = [
        DroVariant::Avg,
        DroVariant::TopK,
        DroVariant::TopKPn,
        DroVariant::Kl,
        DroVariant::Chi2,
        DroVariant::KlGrouped,
    ];
    let mut worst: f64 = 0.0;
    for trial in 0..trials {
        let b = 6 + trial % 3;
        let d = 3 + trial % 4;
        let embed = 2 + trial % 3;
        let hidden = if trial % 2 == 0 { None } else { Some(5) };
        let variant = variants[trial % variants.len()];
        let raw = Array2::from_shape_fn((b, d), |_| rng.random::<f64>() * 2.0 - 1.0);
        let labels: Vec<usize> = (0..b).map(|i| i % 2).collect();
        let model = EmbeddingModel::init(d, hidden, embed, rng.random());
        let pairs = build_pair_system(&labels, false).expect("pairs");
        let cfg = DroConfig {
            variant,
            k: 4,
            gamma: 0.3,
            margin: 2.0, // hinge active and away from the kink everywhere
            ..DroConfig::default()
        };
        let cache = forward(&model, &raw).expect("forward");
        let batch = EmbeddingBatch {
            inputs: raw.clone(),
            embeddings: cache.embeddings,
            labels: labels.clone(),
        };
        let sim = similarity(&batch).expect("sim");
        let losses = loss_matrix(&sim, &pairs, &cfg, LossKind::Margin).expect("losses");
        let assignment = dro::solve(&sim, &losses, &pairs, &cfg).expect("solve");
        let frozen = assignment.weights.clone();
        let flavor_count = assignment.selected_count().max(1) as f64;
        let binary = assignment.flavor == drodml::weights::WeightFlavor::BinarySelection;
        let coeffs = dro::weighted_subgradient_coeffs(&assignment, &losses);
        let analytic = backward(&model, &raw, &pairs, &coeffs)
            .expect("backward")
            .to_flat();
        let fun = |theta: &[f64]| -> f64 {
            let m = model.from_flat(theta);
            let cache = forward(&m, &raw).expect("forward");
            let batch = EmbeddingBatch {
                inputs: raw.clone(),
                embeddings: cache.embeddings,
                labels: labels.clone(),
            };
            let sim = similarity(&batch).expect("sim");
            let losses = loss_matrix(&sim, &pairs, &cfg, LossKind::Margin).expect("losses");
            frozen
                .iter()
                .enumerate()
                .map(|(k, &w)| {
                    let w = if binary { w / flavor_count } else { w };
                    w * losses.loss(k)
                })
                .sum()
        };
        let numeric = finite_diff_grad(fun, &model.to_flat(), 1e-6);
        let diff = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let scale = numeric.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-12);
        worst = worst.max(diff / scale);
    }
    vec![row(
        "backward-vs-finite-diff",
        worst < 1e-4,
        format!("max relative diff {worst:.3e} (tol 1e-4)"),
    )]
}

/// Run all suites and render the pass/fail table; true when all passed.
pub fn run(seed: u64) -> (String, bool) {
    let mut rows = oracle_suite(seed, 30);
    rows.extend(recovery_suite(seed, 20));
    rows.extend(gradient_suite(seed, 12));
    let mut out = String::new();
    let mut all = true;
    for r in &rows {
        all &= r.passed;
        out.push_str(&format!(
            "{} {:<24} {}\n",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.detail
        ));
    }
    (out, all)
}
