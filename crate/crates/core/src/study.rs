//! Estimator-quality studies: spread of the sampled rank estimators on
//! synthetic score vectors, and agreement of the batch estimate with the
//! true rank on a model.

use std::fmt::Write as _;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::InteractionDataset;
use crate::error::{Error, Result};
use crate::model::FactorModel;
use crate::rank::{
    batch_rank_from_scores, check_fraction, default_max_trials, minibatch_rank_on, pairwise_sampled_rank, sample_size,
    true_rank, Comparator, Complement, ItemSampler,
};

/// How synthetic negative scores realizing a given true rank are built.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreConstruction {
    /// Sorted standard normal negatives; the target sits between the r-th
    /// and (r+1)-th largest.
    Gaussian,
    /// `r` negatives at `target + 0.5`, the rest at `target - 2`.
    Step,
}

impl FromStr for ScoreConstruction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(ScoreConstruction::Gaussian),
            "step" => Ok(ScoreConstruction::Step),
            other => Err(Error::config(format!(
                "unknown score construction `{other}` (gaussian|step)"
            ))),
        }
    }
}

/// Scores for `n` items where item `n - 1` is the target and exactly
/// `rank` of the other items score at or above it.
pub fn synthetic_scores<R: Rng + ?Sized>(
    n: usize,
    rank: usize,
    construction: ScoreConstruction,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if n < 2 || rank >= n {
        return Err(Error::config(format!("true rank {rank} must be below item count {n}")));
    }
    let m = n - 1;
    let mut scores = match construction {
        ScoreConstruction::Step => {
            let mut s = vec![-2.0; m];
            s[..rank].iter_mut().for_each(|v| *v = 0.5);
            s.push(0.0);
            s
        }
        ScoreConstruction::Gaussian => {
            let mut s: Vec<f64> = (0..m).map(|_| rng.sample(StandardNormal)).collect();
            s.sort_unstable_by(|a, b| b.total_cmp(a));
            let target = match rank {
                0 => s[0] + 1.0,
                r if r == m => s[m - 1] - 1.0,
                r => 0.5 * (s[r - 1] + s[r]),
            };
            s.push(target);
            s
        }
    };
    // shuffle the negatives so rank does not correlate with index
    let (negatives, _) = scores.split_at_mut(m);
    for i in (1..negatives.len()).rev() {
        let j = rng.random_range(0..=i);
        negatives.swap(i, j);
    }
    Ok(scores)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceConfig {
    pub num_items: usize,
    pub true_ranks: Vec<usize>,
    pub fractions: Vec<f64>,
    pub resamples: usize,
    pub comparator: Comparator,
    pub construction: ScoreConstruction,
    pub seed: u64,
}

impl Default for VarianceConfig {
    fn default() -> Self {
        VarianceConfig {
            num_items: 100_000,
            true_ranks: vec![10, 100, 1000, 10_000],
            fractions: vec![0.01, 0.05, 0.1],
            resamples: 10_000,
            comparator: Comparator::Margin,
            construction: ScoreConstruction::Gaussian,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceRow {
    pub estimator: String,
    /// Sample fraction (minibatch rows only).
    pub q: Option<f64>,
    pub true_rank: usize,
    pub mean: f64,
    pub std: f64,
    pub rel_std: f64,
}

/// Mean and sample standard deviation, shifted by the first value so that
/// constant input gives exactly zero spread.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let Some(&x0) = xs.first() else {
        return (f64::NAN, f64::NAN);
    };
    let n = xs.len() as f64;
    let d_mean = xs.iter().map(|x| x - x0).sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - x0 - d_mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (x0 + d_mean, var.sqrt())
}

fn summarize(estimator: &str, q: Option<f64>, true_rank: usize, xs: &[f64]) -> VarianceRow {
    let (mean, std) = mean_std(xs);
    let rel_std = if std == 0.0 { 0.0 } else { std / mean };
    VarianceRow {
        estimator: estimator.to_string(),
        q,
        true_rank,
        mean,
        std,
        rel_std,
    }
}

const CHUNK: usize = 500;

/// Runs `resamples` draws of `draw` in fixed-size chunks, each with its own
/// deterministic stream, and returns them in chunk order.
fn resample<F>(resamples: usize, seed: u64, stream: u64, draw: F) -> Vec<f64>
where
    F: Fn(&mut ChaCha8Rng, usize) -> Vec<f64> + Sync,
{
    let chunks = resamples.div_ceil(CHUNK);
    (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (stream << 20) ^ c as u64);
            rng.set_stream(stream);
            draw(&mut rng, CHUNK.min(resamples - c * CHUNK))
        })
        .collect::<Vec<_>>()
        .concat()
}

/// Relative spread of the pairwise and minibatch estimators at each true
/// rank; one pairwise row per rank and one minibatch row per `(rank, q)`.
pub fn variance_study(cfg: &VarianceConfig) -> Result<Vec<VarianceRow>> {
    if cfg.resamples == 0 {
        return Err(Error::config("resamples must be at least 1"));
    }
    for &q in &cfg.fractions {
        check_fraction(q)?;
    }
    let n = cfg.num_items;
    let target = n.saturating_sub(1);
    let positives = [target];
    let mut rows = Vec::new();
    for (ri, &rank) in cfg.true_ranks.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(ri as u64);
        let scores = synthetic_scores(n, rank, cfg.construction, &mut rng)?;
        debug_assert_eq!(true_rank(&scores, n, target, &positives)?, rank);
        let negatives = Complement {
            num_items: n,
            positives: &positives,
        };
        let budget = default_max_trials(n - 1);
        let pairwise = resample(cfg.resamples, cfg.seed, 1 + ri as u64 * 64, |rng, k| {
            (0..k)
                .map(|_| {
                    pairwise_sampled_rank(&scores, target, &negatives, rng, budget)
                        .estimate
                        .value
                })
                .collect()
        });
        rows.push(summarize("pairwise", None, rank, &pairwise));
        for (qi, &q) in cfg.fractions.iter().enumerate() {
            let size = sample_size(q, n);
            let draws = resample(cfg.resamples, cfg.seed, 2 + ri as u64 * 64 + qi as u64, |rng, k| {
                let mut sampler = ItemSampler::new(n);
                (0..k)
                    .map(|_| {
                        let z = sampler.draw(rng, size);
                        minibatch_rank_on(cfg.comparator, &scores, target, n, &positives, z).value
                    })
                    .collect()
            });
            rows.push(summarize("minibatch", Some(q), rank, &draws));
        }
    }
    Ok(rows)
}

pub fn variance_csv(rows: &[VarianceRow]) -> String {
    let mut out = String::from("estimator,q,true_rank,mean,std,rel_std\n");
    for r in rows {
        let q = r.q.map_or(String::new(), |q| q.to_string());
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.estimator, q, r.true_rank, r.mean, r.std, r.rel_std
        )
        .unwrap();
    }
    out
}

/// Exact distribution of the pairwise estimate `floor((m - 1) / N)` when
/// `violators` of `m` negatives violate the margin and draws are uniform
/// with replacement, stopping after `max_trials`. Returns `(value, prob)`
/// with the censored outcome reported as value 0.
pub fn pairwise_distribution(num_negatives: usize, violators: usize, max_trials: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    if num_negatives == 0 || violators == 0 {
        out.push((0.0, 1.0));
        return out;
    }
    let p = violators as f64 / num_negatives as f64;
    let mut miss = 1.0;
    for k in 1..=max_trials.max(1) {
        out.push((((num_negatives - 1) / k) as f64, miss * p));
        miss *= 1.0 - p;
    }
    if miss > 0.0 {
        out.push((0.0, miss));
    }
    out
}

pub fn pairwise_expectation(num_negatives: usize, violators: usize, max_trials: usize) -> f64 {
    pairwise_distribution(num_negatives, violators, max_trials)
        .iter()
        .map(|(v, p)| v * p)
        .sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidelityBin {
    pub count: usize,
    pub min_true: usize,
    pub max_true: usize,
    pub mean_true: f64,
    pub mean_estimate: f64,
    pub std_estimate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    /// `(true rank, batch estimate)` per sampled observation.
    pub pairs: Vec<(usize, f64)>,
    pub bins: Vec<FidelityBin>,
    pub pearson: f64,
}

impl FidelityReport {
    /// Whether the bin means of the estimate never decrease.
    pub fn bins_monotone(&self) -> bool {
        self.bins.windows(2).all(|w| w[1].mean_estimate >= w[0].mean_estimate)
    }

    pub fn pairs_csv(&self) -> String {
        let mut out = String::from("true_rank,estimate\n");
        for (t, e) in &self.pairs {
            writeln!(out, "{t},{e}").unwrap();
        }
        out
    }

    pub fn bins_csv(&self) -> String {
        let mut out = String::from("bin,count,min_true,max_true,mean_true,mean_estimate,std_estimate\n");
        for (i, b) in self.bins.iter().enumerate() {
            writeln!(
                out,
                "{i},{},{},{},{},{},{}",
                b.count, b.min_true, b.max_true, b.mean_true, b.mean_estimate, b.std_estimate
            )
            .unwrap();
        }
        out
    }
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    sxy / (sxx * syy).sqrt()
}

/// Pairs the true rank of up to `max_pairs` sampled training positives with
/// their batch estimate under `comparator`, then bins them into `bins`
/// equal-count groups by true rank.
pub fn rank_fidelity_study(
    model: &FactorModel,
    ds: &InteractionDataset,
    comparator: Comparator,
    max_pairs: usize,
    bins: usize,
    seed: u64,
) -> Result<FidelityReport> {
    if bins == 0 {
        return Err(Error::config("bins must be at least 1"));
    }
    let mut observations: Vec<(usize, usize)> = ds.positive_pairs().collect();
    if observations.is_empty() {
        return Err(Error::NoInteractions);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if observations.len() > max_pairs {
        let idx = rand::seq::index::sample(&mut rng, observations.len(), max_pairs);
        let mut picked: Vec<usize> = idx.into_vec();
        picked.sort_unstable();
        observations = picked.into_iter().map(|i| observations[i]).collect();
    }
    let all_items = model.all_items();
    let n = model.num_items();
    let mut pairs: Vec<(usize, f64)> = observations
        .par_iter()
        .map(|&(u, y)| {
            let scores = model.user_scores(u, &all_items)?;
            let positives = ds.positives(u);
            let rank = true_rank(&scores, n, y, positives)?;
            let fy = scores[y];
            let estimate = batch_rank_from_scores(
                comparator,
                fy,
                scores
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| positives.binary_search(i).is_err())
                    .map(|(_, &s)| s),
            );
            Ok((rank, estimate))
        })
        .collect::<Result<_>>()?;
    pairs.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));

    let xs: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
    let ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let pearson = pearson(&xs, &ys);
    let bins = bins.min(pairs.len());
    let mut out = Vec::with_capacity(bins);
    for b in 0..bins {
        let lo = b * pairs.len() / bins;
        let hi = (b + 1) * pairs.len() / bins;
        let chunk = &pairs[lo..hi];
        let est: Vec<f64> = chunk.iter().map(|p| p.1).collect();
        let (mean_estimate, std_estimate) = mean_std(&est);
        out.push(FidelityBin {
            count: chunk.len(),
            min_true: chunk[0].0,
            max_true: chunk[chunk.len() - 1].0,
            mean_true: chunk.iter().map(|p| p.0 as f64).sum::<f64>() / chunk.len() as f64,
            mean_estimate,
            std_estimate,
        });
    }
    Ok(FidelityReport {
        pairs,
        bins: out,
        pearson,
    })
}
