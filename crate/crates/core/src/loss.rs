//! Rank-sensitive losses, the OWA penalty, and the baseline losses.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rank::sigmoid;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossFamily {
    Owa,
    Poly,
    Log,
    Exp,
    BprPair,
    BprBatch,
    CrossEntropy,
}

impl LossFamily {
    pub fn name(self) -> &'static str {
        match self {
            LossFamily::Owa => "owa",
            LossFamily::Poly => "poly",
            LossFamily::Log => "log",
            LossFamily::Exp => "exp",
            LossFamily::BprPair => "bpr",
            LossFamily::BprBatch => "bbpr",
            LossFamily::CrossEntropy => "ce",
        }
    }

    pub fn is_rank_sensitive(self) -> bool {
        matches!(self, LossFamily::Poly | LossFamily::Log | LossFamily::Exp)
    }
}

impl fmt::Display for LossFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "owa" => LossFamily::Owa,
            "poly" => LossFamily::Poly,
            "log" => LossFamily::Log,
            "exp" => LossFamily::Exp,
            "bpr" => LossFamily::BprPair,
            "bbpr" => LossFamily::BprBatch,
            "ce" => LossFamily::CrossEntropy,
            other => {
                return Err(Error::config(format!(
                    "unknown loss `{other}` (owa|poly|log|exp|bpr|bbpr|ce)"
                )))
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub family: LossFamily,
    /// Exponent of the polynomial family, in (0, 1).
    pub p: f64,
    /// Base of the exponential family, > 1.
    pub lambda: f64,
    /// OWA weights; `None` means `1/j`.
    pub alphas: Option<Vec<f64>>,
    /// Use the exact derivative `lambda^-r ln(lambda)` for the exponential
    /// family; `false` drops the `ln(lambda)` factor.
    pub include_log_lambda: bool,
}

impl LossSpec {
    pub fn new(family: LossFamily) -> Self {
        LossSpec {
            family,
            p: 0.5,
            lambda: 2.0,
            alphas: None,
            include_log_lambda: true,
        }
    }

    pub fn poly(p: f64) -> Self {
        LossSpec {
            p,
            ..Self::new(LossFamily::Poly)
        }
    }

    pub fn log() -> Self {
        Self::new(LossFamily::Log)
    }

    pub fn exp(lambda: f64) -> Self {
        LossSpec {
            lambda,
            ..Self::new(LossFamily::Exp)
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.family {
            LossFamily::Poly if !(self.p > 0.0 && self.p < 1.0) => {
                Err(Error::config(format!("poly loss needs 0 < p < 1, got {}", self.p)))
            }
            LossFamily::Exp if !(self.lambda > 1.0 && self.lambda.is_finite()) => {
                Err(Error::config(format!("exp loss needs lambda > 1, got {}", self.lambda)))
            }
            LossFamily::Owa => match &self.alphas {
                Some(a) => OwaWeights::new(a.clone()).map(|_| ()),
                None => Ok(()),
            },
            _ => Ok(()),
        }
    }

    /// The validated rank-sensitive loss this spec describes.
    pub fn rank_loss(&self) -> Result<RankLoss> {
        self.validate()?;
        match self.family {
            LossFamily::Poly => Ok(RankLoss::Poly { p: self.p }),
            LossFamily::Log => Ok(RankLoss::Log),
            LossFamily::Exp => Ok(RankLoss::Exp {
                lambda: self.lambda,
                include_log_lambda: self.include_log_lambda,
            }),
            other => Err(Error::config(format!("`{other}` is not a rank-sensitive loss"))),
        }
    }
}

/// Smooth, increasing, concave loss of an approximate rank.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RankLoss {
    Poly { p: f64 },
    Log,
    Exp { lambda: f64, include_log_lambda: bool },
}

impl RankLoss {
    pub fn value(self, r: f64) -> f64 {
        match self {
            RankLoss::Poly { p } => (1.0 + r).powf(p),
            RankLoss::Log => r.ln_1p(),
            RankLoss::Exp { lambda, .. } => 1.0 - lambda.powf(-r),
        }
    }

    pub fn grad(self, r: f64) -> f64 {
        match self {
            RankLoss::Poly { p } => p * (1.0 + r).powf(p - 1.0),
            RankLoss::Log => 1.0 / (r + 1.0),
            RankLoss::Exp {
                lambda,
                include_log_lambda,
            } => {
                let g = lambda.powf(-r);
                if include_log_lambda {
                    g * lambda.ln()
                } else {
                    g
                }
            }
        }
    }

    /// `ln(grad(r))`, finite even where `grad` underflows (exponential
    /// family at large ranks).
    pub fn log_grad(self, r: f64) -> f64 {
        match self {
            RankLoss::Poly { p } => p.ln() + (p - 1.0) * r.ln_1p(),
            RankLoss::Log => -r.ln_1p(),
            RankLoss::Exp {
                lambda,
                include_log_lambda,
            } => {
                let base = -r * lambda.ln();
                if include_log_lambda {
                    base + lambda.ln().ln()
                } else {
                    base
                }
            }
        }
    }
}

fn check_rank(r: f64) -> Result<()> {
    if !(r >= 0.0) {
        return Err(Error::Contract(format!("rank must be >= 0, got {r}")));
    }
    Ok(())
}

pub fn rank_loss(spec: &LossSpec, r: f64) -> Result<f64> {
    check_rank(r)?;
    Ok(spec.rank_loss()?.value(r))
}

pub fn rank_loss_grad(spec: &LossSpec, r: f64) -> Result<f64> {
    check_rank(r)?;
    Ok(spec.rank_loss()?.grad(r))
}

/// Nonincreasing, nonnegative OWA weights with prefix sums.
#[derive(Clone, Debug, PartialEq)]
pub struct OwaWeights {
    prefix: Vec<f64>,
}

impl OwaWeights {
    pub fn new(alphas: Vec<f64>) -> Result<Self> {
        if alphas.iter().any(|a| !(*a >= 0.0)) {
            return Err(Error::config("OWA weights must be nonnegative"));
        }
        if alphas.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::config("OWA weights must be nonincreasing"));
        }
        let mut prefix = Vec::with_capacity(alphas.len() + 1);
        prefix.push(0.0);
        let mut acc = 0.0;
        for a in alphas {
            acc += a;
            prefix.push(acc);
        }
        Ok(OwaWeights { prefix })
    }

    /// `alpha_j = 1/j` for `j = 1..=len`.
    pub fn harmonic(len: usize) -> Self {
        Self::new((1..=len).map(|j| 1.0 / j as f64).collect()).expect("harmonic weights are valid")
    }

    /// `sum_{j<=r} alpha_j`; ranks past the end clamp to the full sum.
    pub fn penalty(&self, r: usize) -> f64 {
        self.prefix[r.min(self.prefix.len() - 1)]
    }
}

pub fn owa_loss(alphas: &[f64], r: usize) -> Result<f64> {
    Ok(OwaWeights::new(alphas.to_vec())?.penalty(r))
}

/// `log(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `-log sigma(f_y - f_y')`.
pub fn bpr_pair_loss(target: f64, negative: f64) -> f64 {
    softplus(negative - target)
}

/// Derivative of [`bpr_pair_loss`] w.r.t. the negative score (the target
/// derivative is its negation).
pub fn bpr_pair_grad(target: f64, negative: f64) -> f64 {
    sigmoid(negative - target)
}

/// Mean pair loss over `negatives`; zero for an empty set.
pub fn bpr_batch_loss(target: f64, negatives: &[f64]) -> f64 {
    if negatives.is_empty() {
        return 0.0;
    }
    negatives.iter().map(|&s| bpr_pair_loss(target, s)).sum::<f64>() / negatives.len() as f64
}

pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// `-f_y + logsumexp(candidates)`, where `candidates[target]` is `f_y`.
pub fn cross_entropy_loss(target: usize, candidates: &[f64]) -> Result<f64> {
    let Some(&fy) = candidates.get(target) else {
        return Err(Error::Contract("target missing from candidate set".into()));
    };
    Ok(logsumexp(candidates) - fy)
}

/// Gradient of [`cross_entropy_loss`] w.r.t. each candidate score.
pub fn cross_entropy_grad(target: usize, candidates: &[f64]) -> Result<Vec<f64>> {
    if target >= candidates.len() {
        return Err(Error::Contract("target missing from candidate set".into()));
    }
    let lse = logsumexp(candidates);
    let mut g: Vec<f64> = candidates.iter().map(|s| (s - lse).exp()).collect();
    g[target] -= 1.0;
    Ok(g)
}
