//! Solver and loss configuration.

use std::fmt;

use crate::error::{Error, Result};

/// Uncertainty-set choice for the robust loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DroVariant {
    /// Uniform average over all pairs (the non-robust baseline).
    Avg,
    /// Maximal pair loss (full simplex).
    Max,
    /// Mean of the K largest losses (capped simplex).
    TopK,
    /// K/2 hardest positives plus K/2 hardest negatives.
    TopKPn,
    /// KL-regularized weights over the whole active set.
    Kl,
    /// Chi-square ball around the uniform distribution.
    Chi2,
    /// Per-anchor KL-regularized weights (grouped simplexes).
    KlGrouped,
    /// Per-anchor weights with a zero-loss slack element per group.
    MsRecovery,
}

impl DroVariant {
    pub fn name(&self) -> &'static str {
        match self {
            DroVariant::Avg => "avg",
            DroVariant::Max => "max",
            DroVariant::TopK => "topk",
            DroVariant::TopKPn => "topk-pn",
            DroVariant::Kl => "kl",
            DroVariant::Chi2 => "chi2",
            DroVariant::KlGrouped => "kl-grouped",
            DroVariant::MsRecovery => "ms",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "avg" => Ok(DroVariant::Avg),
            "max" => Ok(DroVariant::Max),
            "topk" => Ok(DroVariant::TopK),
            "topk-pn" => Ok(DroVariant::TopKPn),
            "kl" => Ok(DroVariant::Kl),
            "chi2" => Ok(DroVariant::Chi2),
            "kl-grouped" => Ok(DroVariant::KlGrouped),
            "ms" | "ms-recovery" => Ok(DroVariant::MsRecovery),
            other => Err(Error::Config(format!("unknown dro variant '{other}'"))),
        }
    }
}

impl fmt::Display for DroVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Base pairwise loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Margin,
    Binomial,
}

impl LossKind {
    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Margin => "margin",
            LossKind::Binomial => "binomial",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "margin" => Ok(LossKind::Margin),
            "binomial" => Ok(LossKind::Binomial),
            other => Err(Error::Config(format!("unknown loss kind '{other}'"))),
        }
    }
}

/// Pair-weighting method used by the trainer and the imbalance sweep:
/// either a robust-loss solve or one of the mining baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMethod {
    Dro(DroVariant),
    Semihard,
    Dws,
    MsMining,
}

impl TrainMethod {
    pub fn name(&self) -> &'static str {
        match self {
            TrainMethod::Dro(v) => v.name(),
            TrainMethod::Semihard => "semihard",
            TrainMethod::Dws => "dws",
            TrainMethod::MsMining => "ms-mining",
        }
    }
}

/// Hyperparameters for every robust-loss variant in one place.
///
/// Fields not used by the selected variant are ignored by the solver.
#[derive(Debug, Clone)]
pub struct DroConfig {
    pub variant: DroVariant,
    /// Number of pairs kept by the top-K variants.
    pub k: usize,
    /// KL regularization strength for the whole-batch KL variant.
    pub gamma: f64,
    /// Per-anchor KL strengths for the grouped variants.
    pub gamma_pos: f64,
    pub gamma_neg: f64,
    /// Radius of the chi-square ball.
    pub rho: f64,
    /// Margin m of the margin loss.
    pub margin: f64,
    /// Similarity threshold lambda shared by both base losses.
    pub lambda: f64,
    /// Binomial-loss slopes for positive / negative pairs.
    pub alpha: f64,
    pub beta: f64,
    /// Cost multiplier on negative binomial losses.
    pub cost_neg: f64,
    /// Slack-element similarity thresholds for the ms variant.
    pub c_pos: f64,
    pub c_neg: f64,
}

impl Default for DroConfig {
    fn default() -> Self {
        let margin = 0.2;
        let lambda = 0.5;
        Self {
            variant: DroVariant::TopK,
            k: 16,
            gamma: 0.1,
            gamma_pos: 1.0,
            gamma_neg: 1.0,
            rho: 0.25,
            margin,
            lambda,
            alpha: 2.0,
            beta: 50.0,
            cost_neg: 1.0,
            c_pos: lambda + margin,
            c_neg: lambda - margin,
        }
    }
}

impl DroConfig {
    /// Tie the ms-variant hyperparameters to binomial-style slopes:
    /// c+ = lambda + margin, c- = lambda - margin, gamma+ = 1/alpha,
    /// gamma- = 1/beta. With margin = 0 the two slack thresholds coincide
    /// at lambda, which is the setting whose weights reproduce the
    /// single-threshold log-sum-exp gradient weights exactly.
    pub fn ms_recovery_tie(alpha: f64, beta: f64, lambda: f64, margin: f64) -> Self {
        Self {
            variant: DroVariant::MsRecovery,
            gamma_pos: 1.0 / alpha,
            gamma_neg: 1.0 / beta,
            alpha,
            beta,
            lambda,
            margin,
            c_pos: lambda + margin,
            c_neg: lambda - margin,
            ..Self::default()
        }
    }

    /// Basic sanity checks shared by the solvers.
    pub fn validate(&self) -> Result<()> {
        match self.variant {
            DroVariant::TopK | DroVariant::TopKPn => {
                if self.k == 0 {
                    return Err(Error::Config("k must be positive".into()));
                }
                if self.variant == DroVariant::TopKPn && !self.k.is_multiple_of(2) {
                    return Err(Error::Config(format!(
                        "topk-pn needs an even k, got {}",
                        self.k
                    )));
                }
            }
            DroVariant::Kl => {
                if self.gamma <= 0.0 {
                    return Err(Error::Config(format!(
                        "gamma must be positive, got {}",
                        self.gamma
                    )));
                }
            }
            DroVariant::Chi2 => {
                if self.rho <= 0.0 {
                    return Err(Error::Config(format!(
                        "rho must be positive, got {}",
                        self.rho
                    )));
                }
            }
            DroVariant::KlGrouped | DroVariant::MsRecovery => {
                if self.gamma_pos <= 0.0 || self.gamma_neg <= 0.0 {
                    return Err(Error::Config(format!(
                        "group gammas must be positive, got {} / {}",
                        self.gamma_pos, self.gamma_neg
                    )));
                }
            }
            DroVariant::Avg | DroVariant::Max => {}
        }
        Ok(())
    }
}
