//! Rank of a positive item and its approximations.
//!
//! All estimators read scores through [`ItemScores`], so the same code runs
//! against a dense score vector (simulations) or a live model.

use std::cell::RefCell;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{dot, FactorModel};

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparator {
    /// `|1 - f_y + f_y'|_+`
    Margin,
    /// `2 sigma(|1 - f_y + f_y'|_+) - 1`
    SuppressedMargin,
    /// `sigma(f_y' - f_y)`
    Sigmoid,
}

impl Comparator {
    pub const ALL: [Comparator; 3] = [Comparator::Margin, Comparator::SuppressedMargin, Comparator::Sigmoid];

    pub fn name(self) -> &'static str {
        match self {
            Comparator::Margin => "mr",
            Comparator::SuppressedMargin => "smr",
            Comparator::Sigmoid => "sr",
        }
    }

    /// Soft violation of `target` by a negative scored `negative`.
    #[inline]
    pub fn value(self, target: f64, negative: f64) -> f64 {
        match self {
            Comparator::Margin => (1.0 - target + negative).max(0.0),
            Comparator::SuppressedMargin => {
                let t = (1.0 - target + negative).max(0.0);
                2.0 * sigmoid(t) - 1.0
            }
            Comparator::Sigmoid => sigmoid(negative - target),
        }
    }

    /// Derivative of [`Comparator::value`] w.r.t. the negative's score.
    /// The derivative w.r.t. the target score is its negation. Hinge kinks
    /// get the zero subgradient.
    #[inline]
    pub fn grad(self, target: f64, negative: f64) -> f64 {
        match self {
            Comparator::Margin => {
                if 1.0 - target + negative > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Comparator::SuppressedMargin => {
                let t = 1.0 - target + negative;
                if t > 0.0 {
                    let s = sigmoid(t);
                    2.0 * s * (1.0 - s)
                } else {
                    0.0
                }
            }
            Comparator::Sigmoid => {
                let s = sigmoid(negative - target);
                s * (1.0 - s)
            }
        }
    }
}

impl fmt::Display for Comparator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Comparator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mr" => Ok(Comparator::Margin),
            "smr" => Ok(Comparator::SuppressedMargin),
            "sr" => Ok(Comparator::Sigmoid),
            other => Err(Error::config(format!("unknown comparator `{other}` (mr|smr|sr)"))),
        }
    }
}

/// Free function form of [`Comparator::value`].
pub fn comparator(kind: Comparator, target: f64, negative: f64) -> f64 {
    kind.value(target, negative)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Exact,
    Pointwise,
    PairwiseSampled,
    Batch,
    Minibatch,
}

impl EstimatorKind {
    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Exact => "exact",
            EstimatorKind::Pointwise => "pointwise",
            EstimatorKind::PairwiseSampled => "pairwise",
            EstimatorKind::Batch => "batch",
            EstimatorKind::Minibatch => "minibatch",
        }
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(EstimatorKind::Exact),
            "pointwise" => Ok(EstimatorKind::Pointwise),
            "pairwise" => Ok(EstimatorKind::PairwiseSampled),
            "batch" => Ok(EstimatorKind::Batch),
            "minibatch" => Ok(EstimatorKind::Minibatch),
            other => Err(Error::config(format!(
                "unknown estimator `{other}` (exact|pointwise|pairwise|batch|minibatch)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankEstimate {
    pub value: f64,
    pub estimator: EstimatorKind,
    /// Pairwise only.
    pub trials: Option<usize>,
    /// Mini-batch only: `|Z| / |Y|`.
    pub sample_fraction: Option<f64>,
    /// Pairwise sampling ran out of trials without finding a violator.
    pub censored: bool,
}

impl RankEstimate {
    fn plain(value: f64, estimator: EstimatorKind) -> Self {
        RankEstimate {
            value,
            estimator,
            trials: None,
            sample_fraction: None,
            censored: false,
        }
    }
}

/// Read access to per-item scores for one user.
pub trait ItemScores {
    fn item_score(&self, item: usize) -> f64;
}

impl ItemScores for [f64] {
    fn item_score(&self, item: usize) -> f64 {
        self[item]
    }
}

impl ItemScores for Vec<f64> {
    fn item_score(&self, item: usize) -> f64 {
        self[item]
    }
}

/// Scores one user against items on demand; each score equals
/// [`FactorModel::score`] bit for bit.
pub struct UserScorer<'a> {
    model: &'a FactorModel,
    user_repr: Vec<f64>,
    buf: RefCell<Vec<f64>>,
}

impl<'a> UserScorer<'a> {
    pub fn new(model: &'a FactorModel, user: usize) -> Result<Self> {
        Ok(UserScorer {
            model,
            user_repr: model.user_repr(user)?,
            buf: RefCell::new(vec![0.0; model.dim()]),
        })
    }

    pub fn user_repr(&self) -> &[f64] {
        &self.user_repr
    }
}

impl ItemScores for UserScorer<'_> {
    fn item_score(&self, item: usize) -> f64 {
        let mut buf = self.buf.borrow_mut();
        self.model.item_repr_into(item, &mut buf).expect("item index in range");
        dot(&self.user_repr, &buf) + self.model.item_bias_sum(item).expect("item index in range")
    }
}

/// A set of negative items that can be sampled uniformly.
pub trait NegativeSet {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize;
}

impl NegativeSet for [usize] {
    fn len(&self) -> usize {
        <[usize]>::len(self)
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        self[rng.random_range(0..<[usize]>::len(self))]
    }
}

/// All items except a sorted positive list; sampled by rejection.
#[derive(Clone, Copy, Debug)]
pub struct Complement<'a> {
    pub num_items: usize,
    pub positives: &'a [usize],
}

impl NegativeSet for Complement<'_> {
    fn len(&self) -> usize {
        self.num_items - self.positives.len()
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        loop {
            let i = rng.random_range(0..self.num_items);
            if self.positives.binary_search(&i).is_err() {
                return i;
            }
        }
    }
}

/// Number of negatives scored at or above the target (ties count).
/// `positives` must be sorted.
pub fn true_rank<S: ItemScores + ?Sized>(
    scores: &S,
    num_items: usize,
    target: usize,
    positives: &[usize],
) -> Result<usize> {
    if positives.binary_search(&target).is_err() {
        return Err(Error::Contract(format!("item {target} is not a positive")));
    }
    let fy = scores.item_score(target);
    let mut pos = positives.iter().peekable();
    let mut rank = 0;
    for item in 0..num_items {
        if pos.peek() == Some(&&item) {
            pos.next();
            continue;
        }
        if fy <= scores.item_score(item) {
            rank += 1;
        }
    }
    Ok(rank)
}

/// `1 / sigma(score)`, bounded below by 1.
pub fn pointwise_rank(score: f64) -> f64 {
    1.0 + (-score).exp()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairwiseDraw {
    pub estimate: RankEstimate,
    /// The first margin violator, if one was found.
    pub violator: Option<usize>,
}

/// Samples negatives uniformly with replacement until one violates the
/// margin (`1 + f_y' > f_y`). A violator at trial `n` gives the estimate
/// `floor((|negatives| - 1) / n)`; exhausting `max_trials` gives a censored
/// zero.
pub fn pairwise_sampled_rank<S, N, R>(
    scores: &S,
    target: usize,
    negatives: &N,
    rng: &mut R,
    max_trials: usize,
) -> PairwiseDraw
where
    S: ItemScores + ?Sized,
    N: NegativeSet + ?Sized,
    R: Rng + ?Sized,
{
    let fy = scores.item_score(target);
    let n_neg = negatives.len();
    let max_trials = max_trials.max(1);
    if n_neg > 0 {
        for trial in 1..=max_trials {
            let candidate = negatives.sample(rng);
            if 1.0 + scores.item_score(candidate) > fy {
                return PairwiseDraw {
                    estimate: RankEstimate {
                        value: ((n_neg - 1) / trial) as f64,
                        estimator: EstimatorKind::PairwiseSampled,
                        trials: Some(trial),
                        sample_fraction: None,
                        censored: false,
                    },
                    violator: Some(candidate),
                };
            }
        }
    }
    PairwiseDraw {
        estimate: RankEstimate {
            value: 0.0,
            estimator: EstimatorKind::PairwiseSampled,
            trials: Some(max_trials),
            sample_fraction: None,
            censored: true,
        },
        violator: None,
    }
}

/// Default trial budget: `|negatives| - 1`, at least one.
pub fn default_max_trials(num_negatives: usize) -> usize {
    num_negatives.saturating_sub(1).max(1)
}

/// Sum of comparator values of the target against each negative score.
pub fn batch_rank_from_scores<I>(kind: Comparator, target_score: f64, negative_scores: I) -> f64
where
    I: IntoIterator<Item = f64>,
{
    negative_scores.into_iter().map(|s| kind.value(target_score, s)).sum()
}

/// Full-batch estimate over an explicit negative list.
pub fn batch_rank<S: ItemScores + ?Sized>(
    kind: Comparator,
    scores: &S,
    target: usize,
    negatives: &[usize],
) -> RankEstimate {
    let fy = scores.item_score(target);
    let value = batch_rank_from_scores(kind, fy, negatives.iter().map(|&i| scores.item_score(i)));
    RankEstimate::plain(value, EstimatorKind::Batch)
}

/// [`batch_rank`] for a model, scoring through a single `score_block` call.
pub fn batch_rank_for_user(
    kind: Comparator,
    model: &FactorModel,
    user: usize,
    target: usize,
    negatives: &[usize],
) -> Result<RankEstimate> {
    if negatives.contains(&target) {
        return Err(Error::Contract("target item listed among negatives".into()));
    }
    let mut items = Vec::with_capacity(negatives.len() + 1);
    items.push(target);
    items.extend_from_slice(negatives);
    let block = model.score_block(&[user], &items)?;
    let row = block.row(0);
    let value = batch_rank_from_scores(kind, row[0], row[1..].iter().copied());
    Ok(RankEstimate::plain(value, EstimatorKind::Batch))
}

/// `ceil(q * n)`, clamped to `[1, n]`.
pub fn sample_size(q: f64, n: usize) -> usize {
    (((q * n as f64) - 1e-9).ceil() as usize).clamp(1, n.max(1))
}

pub fn check_fraction(q: f64) -> Result<()> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::config(format!("sample fraction q must lie in (0, 1], got {q}")));
    }
    Ok(())
}

/// Draws `ceil(q * n)` distinct items from `0..n`, in random order
/// (identity order when the whole universe is taken).
pub fn sample_items<R: Rng + ?Sized>(rng: &mut R, n: usize, q: f64) -> Vec<usize> {
    let k = sample_size(q, n);
    if k >= n {
        return (0..n).collect();
    }
    rand::seq::index::sample(rng, n, k).into_vec()
}

/// Reusable sampler of distinct items via a partial Fisher-Yates shuffle.
///
/// The permutation is never reset: any permutation is a valid starting
/// point, so each draw is still a uniform subset.
#[derive(Clone, Debug)]
pub struct ItemSampler {
    perm: Vec<usize>,
}

impl ItemSampler {
    pub fn new(num_items: usize) -> Self {
        ItemSampler {
            perm: (0..num_items).collect(),
        }
    }

    pub fn num_items(&self) -> usize {
        self.perm.len()
    }

    /// `k` distinct items; the whole universe in index order when `k >= n`.
    pub fn draw<R: Rng + ?Sized>(&mut self, rng: &mut R, k: usize) -> &[usize] {
        let n = self.perm.len();
        if k >= n {
            self.perm.sort_unstable();
            return &self.perm;
        }
        for i in 0..k {
            let j = rng.random_range(i..n);
            self.perm.swap(i, j);
        }
        &self.perm[..k]
    }
}

/// `(|Y| / |Z|) * sum_{y' in Z, y' not positive} comparator`, with `Z` a
/// uniform subset of the item universe. `positives` must be sorted.
pub fn minibatch_rank_on<S: ItemScores + ?Sized>(
    kind: Comparator,
    scores: &S,
    target: usize,
    num_items: usize,
    positives: &[usize],
    sample: &[usize],
) -> RankEstimate {
    let fy = scores.item_score(target);
    let sum: f64 = sample
        .iter()
        .filter(|i| positives.binary_search(i).is_err())
        .map(|&i| kind.value(fy, scores.item_score(i)))
        .sum();
    let q = sample.len() as f64 / num_items as f64;
    RankEstimate {
        value: num_items as f64 / sample.len() as f64 * sum,
        estimator: EstimatorKind::Minibatch,
        trials: None,
        sample_fraction: Some(q),
        censored: false,
    }
}

/// Draws `Z` and evaluates [`minibatch_rank_on`].
pub fn minibatch_rank<S, R>(
    kind: Comparator,
    scores: &S,
    target: usize,
    num_items: usize,
    positives: &[usize],
    q: f64,
    rng: &mut R,
) -> Result<RankEstimate>
where
    S: ItemScores + ?Sized,
    R: Rng + ?Sized,
{
    check_fraction(q)?;
    if num_items == 0 {
        return Err(Error::data("empty item universe"));
    }
    let z = sample_items(rng, num_items, q);
    Ok(minibatch_rank_on(kind, scores, target, num_items, positives, &z))
}

/// [`minibatch_rank`] for a model, scoring `Z` with one `score_block` call.
pub fn minibatch_rank_for_user<R: Rng + ?Sized>(
    kind: Comparator,
    model: &FactorModel,
    user: usize,
    target: usize,
    positives: &[usize],
    q: f64,
    rng: &mut R,
) -> Result<RankEstimate> {
    check_fraction(q)?;
    let n = model.num_items();
    let z = sample_items(rng, n, q);
    let mut items = Vec::with_capacity(z.len() + 1);
    items.push(target);
    items.extend_from_slice(&z);
    let block = model.score_block(&[user], &items)?;
    let row = block.row(0);
    let fy = row[0];
    let sum: f64 = z
        .iter()
        .zip(&row[1..])
        .filter(|(i, _)| positives.binary_search(i).is_err())
        .map(|(_, &s)| kind.value(fy, s))
        .sum();
    Ok(RankEstimate {
        value: n as f64 / z.len() as f64 * sum,
        estimator: EstimatorKind::Minibatch,
        trials: None,
        sample_fraction: Some(z.len() as f64 / n as f64),
        censored: false,
    })
}
