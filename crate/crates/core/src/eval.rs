//! Top-k recommendation metrics.
//!
//! Binary gains, `log2(i + 1)` discount, uniform averaging over users that
//! have at least one held-out positive.

use std::cmp::Ordering;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::InteractionDataset;
use crate::error::{Error, Result};
use crate::model::FactorModel;

/// Descending score, ascending index.
fn rank_order(scores: &[f64], a: usize, b: usize) -> Ordering {
    scores[b].total_cmp(&scores[a]).then(a.cmp(&b))
}

/// The `k` best items by score, skipping the sorted `exclude` list. Ties go
/// to the smaller item index. Returns fewer than `k` items when not enough
/// remain.
pub fn topk_from_scores(scores: &[f64], k: usize, exclude: &[usize]) -> Vec<usize> {
    let mut candidates: Vec<usize> = (0..scores.len())
        .filter(|i| exclude.binary_search(i).is_err())
        .collect();
    let k = k.min(candidates.len());
    if k == 0 {
        return Vec::new();
    }
    if k < candidates.len() {
        candidates.select_nth_unstable_by(k - 1, |&a, &b| rank_order(scores, a, b));
        candidates.truncate(k);
    }
    candidates.sort_unstable_by(|&a, &b| rank_order(scores, a, b));
    candidates
}

pub fn topk(model: &FactorModel, user: usize, k: usize, exclude: &[usize]) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::config("k must be >= 1"));
    }
    let scores = model.user_scores(user, &model.all_items())?;
    Ok(topk_from_scores(&scores, k, exclude))
}

fn hits(ranked: &[usize], relevant: &[usize], k: usize) -> usize {
    ranked
        .iter()
        .take(k)
        .filter(|i| relevant.binary_search(i).is_ok())
        .count()
}

/// `None` when `relevant` (sorted) is empty: such users are skipped.
pub fn precision_at_k(ranked: &[usize], relevant: &[usize], k: usize) -> Option<f64> {
    if relevant.is_empty() || k == 0 {
        return None;
    }
    Some(hits(ranked, relevant, k) as f64 / k as f64)
}

pub fn recall_at_k(ranked: &[usize], relevant: &[usize], k: usize) -> Option<f64> {
    if relevant.is_empty() || k == 0 {
        return None;
    }
    Some(hits(ranked, relevant, k) as f64 / relevant.len() as f64)
}

pub fn ndcg_at_k(ranked: &[usize], relevant: &[usize], k: usize) -> Option<f64> {
    if relevant.is_empty() || k == 0 {
        return None;
    }
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, i)| relevant.binary_search(i).is_ok())
        .map(|(pos, _)| 1.0 / (pos as f64 + 2.0).log2())
        .sum();
    let idcg: f64 = (0..k.min(relevant.len()))
        .map(|pos| 1.0 / (pos as f64 + 2.0).log2())
        .sum();
    Some(dcg / idcg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cutoffs: Vec<usize>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
    pub users_evaluated: usize,
    pub remove_historical: bool,
    pub fingerprint: String,
}

impl EvalReport {
    pub fn ndcg_at(&self, k: usize) -> Option<f64> {
        self.cutoffs.iter().position(|&c| c == k).map(|i| self.ndcg[i])
    }

    pub fn precision_at(&self, k: usize) -> Option<f64> {
        self.cutoffs.iter().position(|&c| c == k).map(|i| self.precision[i])
    }

    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.cutoffs.iter().position(|&c| c == k).map(|i| self.recall[i])
    }

    /// `metric,k,value` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,k,value\n");
        for (name, values) in [
            ("precision", &self.precision),
            ("recall", &self.recall),
            ("ndcg", &self.ndcg),
        ] {
            for (k, v) in self.cutoffs.iter().zip(values.iter()) {
                let _ = writeln!(out, "{name},{k},{v}");
            }
        }
        out
    }
}

/// Per-user metrics against `test`, excluding `train` positives from the
/// ranked list when `remove_historical` is set.
pub fn evaluate(
    model: &FactorModel,
    train: &InteractionDataset,
    test: &InteractionDataset,
    cutoffs: &[usize],
    remove_historical: bool,
) -> Result<EvalReport> {
    if cutoffs.is_empty() || cutoffs.contains(&0) {
        return Err(Error::config("cutoffs must be a nonempty list of positive integers"));
    }
    if train.num_items() != test.num_items() || train.num_users() != test.num_users() {
        return Err(Error::data("train and test splits do not share vocabularies"));
    }
    if model.num_items() != test.num_items() || model.num_users() != test.num_users() {
        return Err(Error::data("model and data vocabularies differ"));
    }
    let kmax = *cutoffs.iter().max().expect("nonempty");
    let all_items = model.all_items();
    let per_user: Vec<Option<Vec<[f64; 3]>>> = (0..test.num_users())
        .into_par_iter()
        .map(|u| {
            let relevant = test.positives(u);
            if relevant.is_empty() {
                return None;
            }
            let exclude: &[usize] = if remove_historical { train.positives(u) } else { &[] };
            let scores = model.user_scores(u, &all_items).expect("user in range");
            let ranked = topk_from_scores(&scores, kmax, exclude);
            Some(
                cutoffs
                    .iter()
                    .map(|&k| {
                        [
                            precision_at_k(&ranked, relevant, k).unwrap_or(0.0),
                            recall_at_k(&ranked, relevant, k).unwrap_or(0.0),
                            ndcg_at_k(&ranked, relevant, k).unwrap_or(0.0),
                        ]
                    })
                    .collect(),
            )
        })
        .collect();
    let mut sums = vec![[0.0f64; 3]; cutoffs.len()];
    let mut users = 0usize;
    for metrics in per_user.into_iter().flatten() {
        users += 1;
        for (s, m) in sums.iter_mut().zip(metrics) {
            for j in 0..3 {
                s[j] += m[j];
            }
        }
    }
    let mean = |j: usize| -> Vec<f64> {
        sums.iter()
            .map(|s| if users == 0 { 0.0 } else { s[j] / users as f64 })
            .collect()
    };
    let mut hasher = Sha256::new();
    hasher.update(train.fingerprint());
    hasher.update(test.fingerprint());
    hasher.update(format!("{cutoffs:?}/{remove_historical}"));
    Ok(EvalReport {
        cutoffs: cutoffs.to_vec(),
        precision: mean(0),
        recall: mean(1),
        ndcg: mean(2),
        users_evaluated: users,
        remove_historical,
        fingerprint: hex::encode(&hasher.finalize()[..8]),
    })
}
