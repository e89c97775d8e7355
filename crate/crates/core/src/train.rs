//! Training loops: mini-batch BARS with a shared item sample, and the
//! BPR, batch BPR, WARP and cross-entropy baselines, all with plain SGD and
//! early stopping on a development split.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::InteractionDataset;
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::loss::{LossFamily, LossSpec, OwaWeights};
use crate::model::{FactorModel, ModelConfig};
use crate::objective::{batch_objective, bpr_objective, warp_objective, BatchLoss, StepOutput};
use crate::rank::{
    check_fraction, default_max_trials, pairwise_sampled_rank, sample_size, Comparator, Complement, ItemSampler,
    NegativeSet, UserScorer,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Bars,
    Warp,
    Bpr,
    Bbpr,
    Ce,
}

impl Algorithm {
    pub const ALL: [Algorithm; 5] = [
        Algorithm::Bars,
        Algorithm::Warp,
        Algorithm::Bpr,
        Algorithm::Bbpr,
        Algorithm::Ce,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Bars => "bars",
            Algorithm::Warp => "warp",
            Algorithm::Bpr => "bpr",
            Algorithm::Bbpr => "bbpr",
            Algorithm::Ce => "ce",
        }
    }

    /// Loss used when none is given.
    pub fn default_loss(self) -> LossFamily {
        match self {
            Algorithm::Bars => LossFamily::Log,
            Algorithm::Warp => LossFamily::Owa,
            Algorithm::Bpr => LossFamily::BprPair,
            Algorithm::Bbpr => LossFamily::BprBatch,
            Algorithm::Ce => LossFamily::CrossEntropy,
        }
    }

    pub fn accepts(self, loss: LossFamily) -> bool {
        match self {
            Algorithm::Bars => loss.is_rank_sensitive(),
            _ => loss == self.default_loss(),
        }
    }

    /// Whether the algorithm consumes mini-batches with a shared sample.
    pub fn is_minibatch(self) -> bool {
        matches!(self, Algorithm::Bars | Algorithm::Bbpr | Algorithm::Ce)
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::config(format!("unknown algorithm `{s}` (bars|warp|bpr|bbpr|ce)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    /// Comparator of the rank estimate (bars only).
    pub comparator: Comparator,
    pub loss: LossSpec,
    pub batch_size: usize,
    /// Item sample fraction of the shared negative set.
    pub q: f64,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub eval_cutoffs: Vec<usize>,
    /// Cutoff of the dev NDCG used for early stopping.
    pub monitor_cutoff: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            algorithm: Algorithm::Bars,
            comparator: Comparator::SuppressedMargin,
            loss: LossSpec::log(),
            batch_size: 64,
            q: 0.1,
            learning_rate: 1.0,
            max_epochs: 20,
            patience: 3,
            eval_cutoffs: vec![5, 30],
            monitor_cutoff: 30,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Default configuration for `algorithm`, with its matching loss.
    pub fn for_algorithm(algorithm: Algorithm) -> Self {
        TrainConfig {
            algorithm,
            loss: LossSpec::new(algorithm.default_loss()),
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        check_fraction(self.q)?;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.patience == 0 {
            return Err(Error::config("patience must be at least 1"));
        }
        if self.monitor_cutoff == 0 || self.eval_cutoffs.contains(&0) {
            return Err(Error::config("cutoffs must be positive"));
        }
        if !self.algorithm.accepts(self.loss.family) {
            return Err(Error::config(format!(
                "algorithm `{}` cannot train loss `{}`",
                self.algorithm, self.loss.family
            )));
        }
        self.loss.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean step objective (data term plus penalty on touched rows).
    pub objective: f64,
    pub dev_metric: Option<f64>,
    pub seconds: f64,
    /// Mean sampling trials per positive (warp only; censored draws count
    /// the full budget).
    pub mean_trials: Option<f64>,
    pub updates: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub algorithm: Algorithm,
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: Option<usize>,
    pub best_dev_metric: Option<f64>,
    pub stopped_early: bool,
    pub monitor: String,
}

impl TrainReport {
    pub fn objectives(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.objective).collect()
    }

    pub fn dev_trajectory(&self) -> Vec<f64> {
        self.epochs.iter().filter_map(|e| e.dev_metric).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StopDecision {
    pub stop: bool,
    /// 1-based index of the first maximum, `None` for an empty trajectory.
    pub best_epoch: Option<usize>,
}

/// Stops once the best value is `patience` or more evaluations old.
pub fn early_stop(trajectory: &[f64], patience: usize) -> StopDecision {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in trajectory.iter().enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    match best {
        None => StopDecision {
            stop: false,
            best_epoch: None,
        },
        Some((i, _)) => StopDecision {
            stop: trajectory.len() - 1 - i >= patience,
            best_epoch: Some(i + 1),
        },
    }
}

/// What one epoch produced.
struct EpochStats {
    objective_sum: f64,
    steps: usize,
    updates: usize,
    trials: Option<(usize, usize)>,
}

struct Trainer<'a> {
    train: &'a InteractionDataset,
    cfg: &'a TrainConfig,
    reg: &'a ModelConfig,
    rng: ChaCha8Rng,
    sampler: ItemSampler,
    observations: Vec<(usize, usize)>,
    owa: Option<OwaWeights>,
    epoch: usize,
    step: usize,
}

impl Trainer<'_> {
    fn apply(&mut self, model: &mut FactorModel, out: StepOutput) -> Result<f64> {
        self.step += 1;
        let objective = out.objective();
        if !objective.is_finite() || !out.grad.is_finite() {
            return Err(Error::Divergence {
                epoch: self.epoch,
                step: self.step,
                objective,
            });
        }
        model.apply_gradient(&out.grad, self.cfg.learning_rate);
        Ok(objective)
    }

    fn run_epoch(&mut self, model: &mut FactorModel) -> Result<EpochStats> {
        self.observations.shuffle(&mut self.rng);
        let observations = std::mem::take(&mut self.observations);
        let result = match self.cfg.algorithm {
            Algorithm::Bars | Algorithm::Bbpr | Algorithm::Ce => self.minibatch_epoch(model, &observations),
            Algorithm::Warp => self.warp_epoch(model, &observations),
            Algorithm::Bpr => self.bpr_epoch(model, &observations),
        };
        self.observations = observations;
        result
    }

    fn minibatch_epoch(&mut self, model: &mut FactorModel, observations: &[(usize, usize)]) -> Result<EpochStats> {
        let kind = match self.cfg.algorithm {
            Algorithm::Bars => BatchLoss::RankSensitive {
                comparator: self.cfg.comparator,
                loss: self.cfg.loss.rank_loss()?,
            },
            Algorithm::Bbpr => BatchLoss::BatchBpr,
            _ => BatchLoss::CrossEntropy,
        };
        let k = sample_size(self.cfg.q, model.num_items());
        let mut stats = EpochStats {
            objective_sum: 0.0,
            steps: 0,
            updates: 0,
            trials: None,
        };
        for batch in observations.chunks(self.cfg.batch_size) {
            let sample = self.sampler.draw(&mut self.rng, k).to_vec();
            let out = batch_objective(model, self.train, batch, &sample, kind, self.reg)?;
            stats.objective_sum += self.apply(model, out)?;
            stats.steps += 1;
            stats.updates += 1;
        }
        Ok(stats)
    }

    fn warp_epoch(&mut self, model: &mut FactorModel, observations: &[(usize, usize)]) -> Result<EpochStats> {
        let owa = self.owa.clone().expect("warp has weights");
        let num_items = model.num_items();
        let mut stats = EpochStats {
            objective_sum: 0.0,
            steps: 0,
            updates: 0,
            trials: Some((0, 0)),
        };
        for &(u, y) in observations {
            let negatives = Complement {
                num_items,
                positives: self.train.positives(u),
            };
            let draw = {
                let scorer = UserScorer::new(model, u)?;
                let budget = default_max_trials(negatives.len());
                pairwise_sampled_rank(&scorer, y, &negatives, &mut self.rng, budget)
            };
            if let Some((t, n)) = stats.trials.as_mut() {
                *t += draw.estimate.trials.unwrap_or(0);
                *n += 1;
            }
            stats.steps += 1;
            if let Some(violator) = draw.violator {
                let multiplier = owa.penalty(draw.estimate.value as usize);
                let out = warp_objective(model, u, y, violator, multiplier, self.reg)?;
                stats.objective_sum += self.apply(model, out)?;
                stats.updates += 1;
            }
        }
        Ok(stats)
    }

    fn bpr_epoch(&mut self, model: &mut FactorModel, observations: &[(usize, usize)]) -> Result<EpochStats> {
        let num_items = model.num_items();
        let mut stats = EpochStats {
            objective_sum: 0.0,
            steps: 0,
            updates: 0,
            trials: None,
        };
        for &(u, y) in observations {
            let negatives = Complement {
                num_items,
                positives: self.train.positives(u),
            };
            if negatives.len() == 0 {
                continue;
            }
            let negative = negatives.sample(&mut self.rng);
            let out = bpr_objective(model, u, y, negative, self.reg)?;
            stats.objective_sum += self.apply(model, out)?;
            stats.steps += 1;
            stats.updates += 1;
        }
        Ok(stats)
    }
}

/// Trains `model` in place. With a dev split, training stops early on the
/// dev NDCG at `cfg.monitor_cutoff` and the best epoch's parameters are
/// restored; without one it runs `max_epochs` and keeps the last.
pub fn train(
    model: &mut FactorModel,
    train: &InteractionDataset,
    dev: Option<&InteractionDataset>,
    cfg: &TrainConfig,
    reg: &ModelConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if model.num_users() != train.num_users() || model.num_items() != train.num_items() {
        return Err(Error::data("model and training data vocabularies differ"));
    }
    if train.is_empty() {
        return Err(Error::NoInteractions);
    }
    let owa = match cfg.algorithm {
        Algorithm::Warp => Some(match &cfg.loss.alphas {
            Some(a) => OwaWeights::new(a.clone())?,
            None => OwaWeights::harmonic(train.num_items()),
        }),
        _ => None,
    };
    let mut trainer = Trainer {
        train,
        cfg,
        reg,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        sampler: ItemSampler::new(train.num_items()),
        observations: train.positive_pairs().collect(),
        owa,
        epoch: 0,
        step: 0,
    };
    let mut report = TrainReport {
        algorithm: cfg.algorithm,
        epochs: Vec::new(),
        best_epoch: None,
        best_dev_metric: None,
        stopped_early: false,
        monitor: format!("ndcg@{}", cfg.monitor_cutoff),
    };
    let mut best_model: Option<FactorModel> = None;
    let mut trajectory = Vec::new();
    for epoch in 1..=cfg.max_epochs {
        trainer.epoch = epoch;
        let start = Instant::now();
        let stats = trainer.run_epoch(model)?;
        let seconds = start.elapsed().as_secs_f64();
        let objective = stats.objective_sum / stats.steps.max(1) as f64;
        if !model.is_finite() {
            return Err(Error::Divergence {
                epoch,
                step: trainer.step,
                objective: f64::NAN,
            });
        }
        let dev_metric = match dev {
            Some(dev) => {
                let r = evaluate(model, train, dev, &[cfg.monitor_cutoff], true)?;
                Some(r.ndcg[0])
            }
            None => None,
        };
        let mean_trials = stats.trials.map(|(t, n)| t as f64 / n.max(1) as f64);
        log::info!(
            "epoch {epoch}: objective {objective:.6} dev {} ({seconds:.2}s)",
            dev_metric.map_or("-".into(), |v| format!("{v:.5}"))
        );
        report.epochs.push(EpochRecord {
            epoch,
            objective,
            dev_metric,
            seconds,
            mean_trials,
            updates: stats.updates,
        });
        if let Some(m) = dev_metric {
            trajectory.push(m);
            let decision = early_stop(&trajectory, cfg.patience);
            if decision.best_epoch == Some(epoch) {
                best_model = Some(model.clone());
                report.best_epoch = Some(epoch);
                report.best_dev_metric = Some(m);
            }
            if decision.stop {
                report.stopped_early = epoch < cfg.max_epochs;
                break;
            }
        }
    }
    match best_model {
        Some(best) => *model = best,
        None => report.best_epoch = report.epochs.last().map(|e| e.epoch),
    }
    Ok(report)
}

/// Uniform random seed stream for callers that need several derived seeds.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.random()
}
