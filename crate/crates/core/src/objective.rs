//! Per-step objectives and their analytic gradients.
//!
//! Each function scores a fixed mini-batch against the current model and
//! returns the objective together with a sparse [`Gradient`] over every
//! attribute row it touched. Gradients flow through the scores:
//! `d score / d user vector = item vector`, `d score / d item vector = user
//! vector`, `d score / d item bias = 1`, then fan out to attribute rows.
//!
//! Mini-batch objectives are means over the batch's observations; the L2
//! penalty covers the touched rows only.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::data::InteractionDataset;
use crate::error::{Error, Result};
use crate::loss::{bpr_pair_grad, bpr_pair_loss, logsumexp, RankLoss};
use crate::model::{dot, FactorModel, Gradient, ModelConfig};
use crate::rank::{sigmoid, Comparator};

#[derive(Clone, Debug)]
pub struct StepOutput {
    /// Data term (mean over observations).
    pub loss: f64,
    /// L2 penalty over touched rows.
    pub penalty: f64,
    pub grad: Gradient,
}

impl StepOutput {
    pub fn objective(&self) -> f64 {
        self.loss + self.penalty
    }
}

/// Loss term for one shared-sample mini-batch.
#[derive(Clone, Copy, Debug)]
pub enum BatchLoss {
    /// Rank-sensitive loss of the mini-batch rank estimate.
    RankSensitive { comparator: Comparator, loss: RankLoss },
    /// Mean logistic pair loss against the sampled negatives.
    BatchBpr,
    /// Softmax cross entropy over the shared candidate set.
    CrossEntropy,
}

/// Scores of the batch's users against the candidate set `Z ∪ positives`.
struct BlockScores {
    users: Vec<usize>,
    user_slot: HashMap<usize, usize>,
    user_reprs: crate::model::EmbeddingTable,
    items: Vec<usize>,
    item_slot: HashMap<usize, usize>,
    item_reprs: crate::model::EmbeddingTable,
    scores: Vec<f64>,
}

impl BlockScores {
    fn new(model: &FactorModel, observations: &[(usize, usize)], sample: &[usize]) -> Result<Self> {
        let mut users = Vec::new();
        let mut user_slot = HashMap::new();
        for &(u, _) in observations {
            user_slot.entry(u).or_insert_with(|| {
                users.push(u);
                users.len() - 1
            });
        }
        let mut items: Vec<usize> = sample.to_vec();
        items.extend(observations.iter().map(|&(_, i)| i));
        items.sort_unstable();
        items.dedup();
        let item_slot = items.iter().enumerate().map(|(c, &i)| (i, c)).collect();
        let user_reprs = model.user_block(&users)?;
        let block = model.item_block(&items)?;
        let scores: Vec<f64> = (0..users.len())
            .into_par_iter()
            .flat_map_iter(|r| FactorModel::scores_against(user_reprs.row(r), &block))
            .collect();
        Ok(BlockScores {
            users,
            user_slot,
            user_reprs,
            items,
            item_slot,
            item_reprs: block.reprs,
            scores,
        })
    }

    fn row(&self, slot: usize) -> &[f64] {
        let n = self.items.len();
        &self.scores[slot * n..(slot + 1) * n]
    }
}

/// One observation's contribution: its loss and `d loss / d score` for
/// each candidate column it touches.
type Contribution = (f64, Vec<(usize, f64)>);

fn observation_term(
    kind: BatchLoss,
    fy: f64,
    target_col: usize,
    row: &[f64],
    sample_cols: &[(usize, bool)],
    scale: f64,
) -> Contribution {
    match kind {
        BatchLoss::RankSensitive { comparator, loss } => {
            let mut sum = 0.0;
            let mut grads = Vec::with_capacity(sample_cols.len() + 1);
            for &(c, positive) in sample_cols {
                if positive {
                    continue;
                }
                sum += comparator.value(fy, row[c]);
                let g = comparator.grad(fy, row[c]);
                if g != 0.0 {
                    grads.push((c, g));
                }
            }
            let estimate = scale * sum;
            let dl = loss.grad(estimate) * scale;
            let mut target = 0.0;
            for (_, g) in &mut grads {
                target -= *g;
                *g *= dl;
            }
            grads.push((target_col, dl * target));
            (loss.value(estimate), grads)
        }
        BatchLoss::BatchBpr => {
            let negatives: Vec<usize> = sample_cols
                .iter()
                .filter(|(_, positive)| !positive)
                .map(|&(c, _)| c)
                .collect();
            if negatives.is_empty() {
                return (0.0, Vec::new());
            }
            let inv = 1.0 / negatives.len() as f64;
            let mut loss = 0.0;
            let mut target = 0.0;
            let mut grads = Vec::with_capacity(negatives.len() + 1);
            for c in negatives {
                loss += bpr_pair_loss(fy, row[c]);
                let g = bpr_pair_grad(fy, row[c]) * inv;
                target -= g;
                grads.push((c, g));
            }
            grads.push((target_col, target));
            (loss * inv, grads)
        }
        BatchLoss::CrossEntropy => {
            let lse = logsumexp(row);
            let mut grads: Vec<(usize, f64)> = row.iter().enumerate().map(|(c, s)| (c, (s - lse).exp())).collect();
            grads[target_col].1 -= 1.0;
            (lse - fy, grads)
        }
    }
}

/// Objective and gradient of one mini-batch that shares the item sample
/// `sample` (the `Z` of the rank estimator) across all its observations.
///
/// For the rank-sensitive loss, each observation `(x, y)` contributes
/// `loss((|Y| / |Z|) * sum_{z in Z, z not positive for x} comparator(f_y, f_z))`.
/// Batch BPR averages the logistic loss over the same masked negatives, and
/// cross entropy normalizes over every candidate (`Z` plus the batch's
/// positives).
pub fn batch_objective(
    model: &FactorModel,
    train: &InteractionDataset,
    observations: &[(usize, usize)],
    sample: &[usize],
    kind: BatchLoss,
    reg: &ModelConfig,
) -> Result<StepOutput> {
    if observations.is_empty() {
        return Err(Error::Contract("empty mini-batch".into()));
    }
    let block = BlockScores::new(model, observations, sample)?;
    let n_cols = block.items.len();
    let scale = model.num_items() as f64 / sample.len().max(1) as f64;
    let m = observations.len() as f64;

    let contributions: Vec<(usize, Contribution)> = observations
        .par_iter()
        .map(|&(u, y)| {
            let slot = block.user_slot[&u];
            let row = block.row(slot);
            let target_col = block.item_slot[&y];
            let positives = train.positives(u);
            let sample_cols: Vec<(usize, bool)> = sample
                .iter()
                .map(|z| (block.item_slot[z], positives.binary_search(z).is_ok()))
                .collect();
            (
                slot,
                observation_term(kind, row[target_col], target_col, row, &sample_cols, scale),
            )
        })
        .collect();

    // d objective / d score, users x candidates; accumulated in batch order
    let mut dscore = vec![0.0; block.users.len() * n_cols];
    let mut loss = 0.0;
    for (slot, (l, grads)) in contributions {
        loss += l;
        let row = &mut dscore[slot * n_cols..(slot + 1) * n_cols];
        for (c, g) in grads {
            row[c] += g / m;
        }
    }
    let loss = loss / m;

    let dim = model.dim();
    let mut grad = Gradient::default();
    let mut buf = vec![0.0; dim];
    for (slot, &u) in block.users.iter().enumerate() {
        buf.fill(0.0);
        let row = &dscore[slot * n_cols..(slot + 1) * n_cols];
        for (c, &g) in row.iter().enumerate() {
            if g != 0.0 {
                for (b, v) in buf.iter_mut().zip(block.item_reprs.row(c)) {
                    *b += g * v;
                }
            }
        }
        grad.add_user(model, u, &buf, 1.0);
    }
    for (c, &item) in block.items.iter().enumerate() {
        buf.fill(0.0);
        let mut bias = 0.0;
        for slot in 0..block.users.len() {
            let g = dscore[slot * n_cols + c];
            if g != 0.0 {
                bias += g;
                for (b, v) in buf.iter_mut().zip(block.user_reprs.row(slot)) {
                    *b += g * v;
                }
            }
        }
        grad.add_item(model, item, &buf, 1.0);
        grad.add_item_bias(model, item, bias);
    }
    let penalty = grad.add_regularization(model, reg);
    Ok(StepOutput { loss, penalty, grad })
}

/// Loss of a single (user, positive, negative) triple as a function of the
/// two scores, returning `(loss, d loss / d f_negative)`. The target
/// derivative is the negation.
fn pair_objective(
    model: &FactorModel,
    user: usize,
    positive: usize,
    negative: usize,
    reg: &ModelConfig,
    term: impl Fn(f64, f64) -> (f64, f64),
) -> Result<StepOutput> {
    let u = model.user_repr(user)?;
    let vp = model.item_repr(positive)?;
    let vn = model.item_repr(negative)?;
    let fy = dot(&u, &vp) + model.item_bias_sum(positive)?;
    let fn_ = dot(&u, &vn) + model.item_bias_sum(negative)?;
    let (loss, g) = term(fy, fn_);
    let mut grad = Gradient::default();
    // d/d user = g * (v_neg - v_pos)
    let du: Vec<f64> = vn.iter().zip(&vp).map(|(a, b)| g * (a - b)).collect();
    grad.add_user(model, user, &du, 1.0);
    grad.add_item(model, negative, &u, g);
    grad.add_item(model, positive, &u, -g);
    grad.add_item_bias(model, negative, g);
    grad.add_item_bias(model, positive, -g);
    let penalty = grad.add_regularization(model, reg);
    Ok(StepOutput { loss, penalty, grad })
}

/// `-log sigma(f_y - f_y')` for one sampled negative.
pub fn bpr_objective(
    model: &FactorModel,
    user: usize,
    positive: usize,
    negative: usize,
    reg: &ModelConfig,
) -> Result<StepOutput> {
    pair_objective(model, user, positive, negative, reg, |fy, fn_| {
        (bpr_pair_loss(fy, fn_), sigmoid(fn_ - fy))
    })
}

/// `multiplier * |1 - f_y + f_y'|_+`, the multiplier being the OWA penalty
/// of the sampled rank estimate (held constant).
pub fn warp_objective(
    model: &FactorModel,
    user: usize,
    positive: usize,
    violator: usize,
    multiplier: f64,
    reg: &ModelConfig,
) -> Result<StepOutput> {
    pair_objective(model, user, positive, violator, reg, |fy, fn_| {
        let t = 1.0 - fy + fn_;
        if t > 0.0 {
            (multiplier * t, multiplier)
        } else {
            (0.0, 0.0)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Catalog;
    use crate::loss::{bpr_batch_loss, cross_entropy_loss, LossSpec};
    use crate::rank::minibatch_rank_on;
    use std::sync::Arc;

    fn setup() -> (FactorModel, InteractionDataset) {
        let mut cat = Catalog::with_counts(3, 8);
        cat.add_item_attribute(1, "g").unwrap();
        cat.add_item_attribute(2, "g").unwrap();
        cat.add_user_attribute(0, "a").unwrap();
        let pairs = [(0, 1), (0, 3), (1, 2), (2, 0), (2, 5)];
        let its = pairs
            .iter()
            .map(|&(u, i)| crate::data::Interaction::new(u, i, 0))
            .collect();
        let ds = InteractionDataset::new(Arc::new(cat), its).unwrap();
        let cfg = ModelConfig {
            dim: 4,
            init_scale: 0.6,
            seed: 12,
            ..ModelConfig::default()
        };
        let mut m = FactorModel::new(&cfg, ds.catalog()).unwrap();
        for (k, b) in m.item_bias_mut().iter_mut().enumerate() {
            *b = 0.05 * k as f64;
        }
        (m, ds)
    }

    #[test]
    fn rank_sensitive_loss_matches_estimator() {
        let (m, ds) = setup();
        let obs = [(0, 1), (2, 5)];
        let sample = [0, 2, 3, 6];
        let loss = LossSpec::log().rank_loss().unwrap();
        for comparator in Comparator::ALL {
            let out = batch_objective(
                &m,
                &ds,
                &obs,
                &sample,
                BatchLoss::RankSensitive { comparator, loss },
                &ModelConfig::default(),
            )
            .unwrap();
            let mut expected = 0.0;
            for &(u, y) in &obs {
                let scores: Vec<f64> = (0..8).map(|i| m.score(u, i).unwrap()).collect();
                let est = minibatch_rank_on(comparator, &scores, y, 8, ds.positives(u), &sample);
                expected += loss.value(est.value);
            }
            assert!((out.loss - expected / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bbpr_and_ce_losses_match_reference() {
        let (m, ds) = setup();
        let obs = [(0, 1), (1, 2)];
        let sample = [0, 3, 4];
        let bb = batch_objective(&m, &ds, &obs, &sample, BatchLoss::BatchBpr, &ModelConfig::default()).unwrap();
        let ce = batch_objective(&m, &ds, &obs, &sample, BatchLoss::CrossEntropy, &ModelConfig::default()).unwrap();
        let mut bb_ref = 0.0;
        let mut ce_ref = 0.0;
        let candidates = [0, 1, 2, 3, 4];
        for &(u, y) in &obs {
            let negs: Vec<f64> = sample
                .iter()
                .filter(|z| !ds.is_positive(u, **z))
                .map(|&z| m.score(u, z).unwrap())
                .collect();
            bb_ref += bpr_batch_loss(m.score(u, y).unwrap(), &negs);
            let cs: Vec<f64> = candidates.iter().map(|&i| m.score(u, i).unwrap()).collect();
            ce_ref += cross_entropy_loss(candidates.iter().position(|&c| c == y).unwrap(), &cs).unwrap();
        }
        assert!((bb.loss - bb_ref / 2.0).abs() < 1e-12);
        assert!((ce.loss - ce_ref / 2.0).abs() < 1e-12);
    }

    #[test]
    fn ce_with_single_candidate_is_zero() {
        let (m, ds) = setup();
        let out = batch_objective(
            &m,
            &ds,
            &[(0, 1)],
            &[1],
            BatchLoss::CrossEntropy,
            &ModelConfig::default(),
        )
        .unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.grad.user_rows.values().flatten().all(|&g| g == 0.0));
        assert!(out.grad.item_rows.values().flatten().all(|&g| g == 0.0));
    }

    #[test]
    fn saturated_bpr_has_vanishing_gradient() {
        let (mut m, _) = setup();
        m.item_bias_mut()[1] = 1e3;
        let out = bpr_objective(&m, 0, 1, 4, &ModelConfig::default()).unwrap();
        assert!(out.loss < 1e-300);
        assert!(out.grad.user_rows.values().flatten().all(|g| g.abs() < 1e-300));
    }

    #[test]
    fn warp_without_violation_has_no_gradient() {
        let (mut m, _) = setup();
        m.item_bias_mut()[1] = 50.0;
        let out = warp_objective(&m, 0, 1, 4, 3.0, &ModelConfig::default()).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.grad.item_bias.values().all(|&g| g == 0.0));
    }

    #[test]
    fn bbpr_full_batch_hand_gradient() {
        // 1 user, 3 items, item 0 positive; score = item bias only
        let ds = InteractionDataset::from_pairs(1, 3, &[(0, 0)]).unwrap();
        let cfg = ModelConfig {
            dim: 1,
            init_scale: 0.0,
            ..ModelConfig::default()
        };
        let mut m = FactorModel::new(&cfg, ds.catalog()).unwrap();
        m.item_bias_mut().copy_from_slice(&[0.2, 0.5, -0.4]);
        let out = batch_objective(&m, &ds, &[(0, 0)], &[0, 1, 2], BatchLoss::BatchBpr, &cfg).unwrap();
        let g1 = sigmoid(0.5 - 0.2) / 2.0;
        let g2 = sigmoid(-0.4 - 0.2) / 2.0;
        assert!((out.grad.item_bias[&1] - g1).abs() < 1e-15);
        assert!((out.grad.item_bias[&2] - g2).abs() < 1e-15);
        assert!((out.grad.item_bias[&0] + g1 + g2).abs() < 1e-15);
    }
}
