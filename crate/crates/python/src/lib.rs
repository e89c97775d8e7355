//! Python bindings: datasets, models, rank estimators, losses, training,
//! evaluation and the estimator studies.

use std::path::PathBuf;
use std::sync::Arc;

use bars_core::data::{self, AttributePaths, InputFormat, InteractionDataset};
use bars_core::eval;
use bars_core::loss::{self, LossFamily, LossSpec};
use bars_core::model::{Checkpoint, FactorModel, ModelConfig};
use bars_core::rank::{self, Comparator};
use bars_core::study::{self, ScoreConstruction, VarianceConfig};
use bars_core::synth::{self, SynthConfig};
use bars_core::train::{self, Algorithm, TrainConfig};
use bars_core::Error;
use pyo3::exceptions::{PyIOError, PyIndexError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyAny;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

fn to_py(err: Error) -> PyErr {
    match err {
        Error::Config(_) | Error::Contract(_) => PyValueError::new_err(err.to_string()),
        Error::Lookup { .. } => PyIndexError::new_err(err.to_string()),
        Error::Io(_) | Error::Parse { .. } | Error::UnknownEntity { .. } => PyIOError::new_err(err.to_string()),
        _ => PyRuntimeError::new_err(err.to_string()),
    }
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(to_py)
}

/// Converts a serializable value into plain Python objects via JSON.
fn to_object<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Interaction log over a user/item catalog.
#[pyclass(name = "Dataset", module = "bars", frozen)]
struct PyDataset {
    inner: InteractionDataset,
}

#[pymethods]
impl PyDataset {
    /// Builds a dataset from `(user, item)` index pairs.
    #[staticmethod]
    fn from_pairs(num_users: usize, num_items: usize, pairs: Vec<(usize, usize)>) -> PyResult<Self> {
        let inner = InteractionDataset::from_pairs(num_users, num_items, &pairs).map_err(to_py)?;
        Ok(PyDataset { inner })
    }

    /// Loads a `user<TAB>item[<TAB>timestamp]` file.
    #[staticmethod]
    #[pyo3(signature = (path, user_attrs=None, item_attrs=None))]
    fn load(path: PathBuf, user_attrs: Option<PathBuf>, item_attrs: Option<PathBuf>) -> PyResult<Self> {
        let attrs = AttributePaths {
            user: user_attrs,
            item: item_attrs,
        };
        let inner = data::load_interactions(&path, InputFormat::TsvTriples, &attrs).map_err(to_py)?;
        Ok(PyDataset { inner })
    }

    /// Synthetic data with planted low-rank structure.
    #[staticmethod]
    #[pyo3(signature = (users=1000, items=2000, affinity=8.0, popularity_exponent=0.8, seed=0))]
    fn synthetic(users: usize, items: usize, affinity: f64, popularity_exponent: f64, seed: u64) -> PyResult<Self> {
        let cfg = SynthConfig {
            users,
            items,
            affinity,
            popularity_exponent,
            seed,
            ..SynthConfig::default()
        };
        let inner = synth::generate(&cfg).map_err(to_py)?;
        Ok(PyDataset { inner })
    }

    /// Random global split into `(train, test)`.
    fn split_random(&self, test_fraction: f64, seed: u64) -> PyResult<(PyDataset, PyDataset)> {
        let split = data::split_random(&self.inner, test_fraction, seed).map_err(to_py)?;
        Ok((PyDataset { inner: split.train }, PyDataset { inner: split.test }))
    }

    /// Per-user chronological split into `(train, test)`.
    fn split_chronological(&self, test_fraction: f64) -> PyResult<(PyDataset, PyDataset)> {
        let split = data::split_chronological(&self.inner, test_fraction).map_err(to_py)?;
        Ok((PyDataset { inner: split.train }, PyDataset { inner: split.test }))
    }

    #[getter]
    fn num_users(&self) -> usize {
        self.inner.num_users()
    }

    #[getter]
    fn num_items(&self) -> usize {
        self.inner.num_items()
    }

    fn positives(&self, user: usize) -> PyResult<Vec<usize>> {
        if user >= self.inner.num_users() {
            return Err(to_py(Error::Lookup {
                kind: "user",
                index: user,
            }));
        }
        Ok(self.inner.positives(user).to_vec())
    }

    fn stats<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_object(py, &data::dataset_stats(&self.inner).map_err(to_py)?)
    }

    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(users={}, items={}, interactions={})",
            self.inner.num_users(),
            self.inner.num_items(),
            self.inner.len()
        )
    }
}

/// Factorization model with attribute-summed representations.
#[pyclass(name = "Model", module = "bars")]
struct PyModel {
    inner: FactorModel,
    config: ModelConfig,
    catalog: Arc<data::Catalog>,
}

fn model_config(dim: usize, init_scale: f64, l2_user: f64, l2_item: f64, seed: u64) -> ModelConfig {
    ModelConfig {
        dim,
        init_scale,
        l2_user,
        l2_item,
        seed,
    }
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (dataset, dim=32, init_scale=0.05, l2_user=0.0, l2_item=0.0, seed=0))]
    fn new(dataset: &PyDataset, dim: usize, init_scale: f64, l2_user: f64, l2_item: f64, seed: u64) -> PyResult<Self> {
        let config = model_config(dim, init_scale, l2_user, l2_item, seed);
        let catalog = dataset.inner.catalog().clone();
        let inner = FactorModel::new(&config, &catalog).map_err(to_py)?;
        Ok(PyModel { inner, config, catalog })
    }

    /// Item-popularity baseline fitted on `train`.
    #[staticmethod]
    fn popularity(train: &PyDataset) -> PyResult<Self> {
        let inner = FactorModel::popularity(&train.inner).map_err(to_py)?;
        let config = ModelConfig {
            dim: inner.dim(),
            ..ModelConfig::default()
        };
        Ok(PyModel {
            inner,
            config,
            catalog: train.inner.catalog().clone(),
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ckpt = Checkpoint::load(&path).map_err(to_py)?;
        Ok(PyModel {
            inner: ckpt.model,
            config: ckpt.config,
            catalog: Arc::new(ckpt.catalog),
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        Checkpoint::new(self.config.clone(), (*self.catalog).clone(), self.inner.clone())
            .save(&path)
            .map_err(to_py)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn score(&self, user: usize, item: usize) -> PyResult<f64> {
        self.inner.score(user, item).map_err(to_py)
    }

    /// Scores of `user` against every item.
    fn user_scores(&self, user: usize) -> PyResult<Vec<f64>> {
        self.inner.user_scores(user, &self.inner.all_items()).map_err(to_py)
    }

    #[pyo3(signature = (user, k, exclude=Vec::new()))]
    fn topk(&self, user: usize, k: usize, exclude: Vec<usize>) -> PyResult<Vec<usize>> {
        let mut exclude = exclude;
        exclude.sort_unstable();
        exclude.dedup();
        eval::topk(&self.inner, user, k, &exclude).map_err(to_py)
    }

    /// Trains in place and returns the training report as a dict.
    #[pyo3(signature = (
        train, dev=None, algorithm="bars", comparator=None, loss=None, p=0.5, lam=2.0,
        batch_size=64, q=0.1, learning_rate=1.0, epochs=20, patience=3, seed=0
    ))]
    #[allow(clippy::too_many_arguments)]
    fn fit<'py>(
        &mut self,
        py: Python<'py>,
        train: &PyDataset,
        dev: Option<&PyDataset>,
        algorithm: &str,
        comparator: Option<&str>,
        loss: Option<&str>,
        p: f64,
        lam: f64,
        batch_size: usize,
        q: f64,
        learning_rate: f64,
        epochs: usize,
        patience: usize,
        seed: u64,
    ) -> PyResult<Bound<'py, PyAny>> {
        let algorithm: Algorithm = parse(algorithm)?;
        let mut cfg = TrainConfig::for_algorithm(algorithm);
        if let Some(c) = comparator {
            cfg.comparator = parse(c)?;
        }
        if let Some(l) = loss {
            let family: LossFamily = parse(l)?;
            cfg.loss = LossSpec {
                p,
                lambda: lam,
                ..LossSpec::new(family)
            };
        }
        cfg.batch_size = batch_size;
        cfg.q = q;
        cfg.learning_rate = learning_rate;
        cfg.max_epochs = epochs;
        cfg.patience = patience;
        cfg.seed = seed;
        let reg = self.config.clone();
        let report = py
            .detach(|| train::train(&mut self.inner, &train.inner, dev.map(|d| &d.inner), &cfg, &reg))
            .map_err(to_py)?;
        to_object(py, &report)
    }

    /// Precision, recall and NDCG at each cutoff, as a dict.
    #[pyo3(signature = (train, test, cutoffs=vec![5, 30], remove_historical=true))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        train: &PyDataset,
        test: &PyDataset,
        cutoffs: Vec<usize>,
        remove_historical: bool,
    ) -> PyResult<Bound<'py, PyAny>> {
        let report = py
            .detach(|| eval::evaluate(&self.inner, &train.inner, &test.inner, &cutoffs, remove_historical))
            .map_err(to_py)?;
        to_object(py, &report)
    }

    /// Estimated rank of `target` for `user` under one of the estimators.
    #[pyo3(signature = (user, target, positives, estimator="minibatch", comparator="mr", q=0.1, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn estimate_rank(
        &self,
        user: usize,
        target: usize,
        positives: Vec<usize>,
        estimator: &str,
        comparator: &str,
        q: f64,
        seed: u64,
    ) -> PyResult<f64> {
        let estimator: rank::EstimatorKind = parse(estimator)?;
        let kind: Comparator = parse(comparator)?;
        let mut positives = positives;
        positives.sort_unstable();
        positives.dedup();
        let scores = self.user_scores(user)?;
        let n = scores.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let value = match estimator {
            rank::EstimatorKind::Exact => rank::true_rank(&scores, n, target, &positives).map_err(to_py)? as f64,
            rank::EstimatorKind::Pointwise => rank::pointwise_rank(*scores.get(target).ok_or_else(|| {
                to_py(Error::Lookup {
                    kind: "item",
                    index: target,
                })
            })?),
            rank::EstimatorKind::Batch => {
                let negatives: Vec<usize> = (0..n).filter(|i| positives.binary_search(i).is_err()).collect();
                rank::batch_rank(kind, &scores, target, &negatives).value
            }
            rank::EstimatorKind::Minibatch => {
                rank::minibatch_rank(kind, &scores, target, n, &positives, q, &mut rng)
                    .map_err(to_py)?
                    .value
            }
            rank::EstimatorKind::PairwiseSampled => {
                let negatives: Vec<usize> = (0..n).filter(|i| positives.binary_search(i).is_err()).collect();
                let budget = rank::default_max_trials(negatives.len());
                rank::pairwise_sampled_rank(&scores, target, negatives.as_slice(), &mut rng, budget)
                    .estimate
                    .value
            }
        };
        Ok(value)
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(users={}, items={}, dim={})",
            self.inner.num_users(),
            self.inner.num_items(),
            self.inner.dim()
        )
    }
}

/// Comparator value of a target score against one negative score.
#[pyfunction]
fn comparator(kind: &str, target: f64, negative: f64) -> PyResult<f64> {
    Ok(parse::<Comparator>(kind)?.value(target, negative))
}

/// Rank-sensitive loss `family` (poly|log|exp) evaluated at rank `r`.
#[pyfunction]
#[pyo3(signature = (family, r, p=0.5, lam=2.0))]
fn rank_loss(family: &str, r: f64, p: f64, lam: f64) -> PyResult<f64> {
    let spec = LossSpec {
        p,
        lambda: lam,
        ..LossSpec::new(parse(family)?)
    };
    loss::rank_loss(&spec, r).map_err(to_py)
}

/// Derivative of [`rank_loss`] with respect to the rank.
#[pyfunction]
#[pyo3(signature = (family, r, p=0.5, lam=2.0))]
fn rank_loss_grad(family: &str, r: f64, p: f64, lam: f64) -> PyResult<f64> {
    let spec = LossSpec {
        p,
        lambda: lam,
        ..LossSpec::new(parse(family)?)
    };
    loss::rank_loss_grad(&spec, r).map_err(to_py)
}

/// Exact rank of `target` given a full score vector.
#[pyfunction]
fn true_rank(scores: Vec<f64>, target: usize, positives: Vec<usize>) -> PyResult<usize> {
    let mut positives = positives;
    positives.sort_unstable();
    positives.dedup();
    rank::true_rank(&scores, scores.len(), target, &positives).map_err(to_py)
}

/// Estimator variance study as a list of dicts.
#[pyfunction]
#[pyo3(signature = (num_items=100_000, true_ranks=vec![10, 100, 1000, 10000], fractions=vec![0.01, 0.05, 0.1], resamples=1000, comparator="mr", construction="gaussian", seed=0))]
#[allow(clippy::too_many_arguments)]
fn variance_study<'py>(
    py: Python<'py>,
    num_items: usize,
    true_ranks: Vec<usize>,
    fractions: Vec<f64>,
    resamples: usize,
    comparator: &str,
    construction: &str,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = VarianceConfig {
        num_items,
        true_ranks,
        fractions,
        resamples,
        comparator: parse(comparator)?,
        construction: parse::<ScoreConstruction>(construction)?,
        seed,
    };
    let rows = py.detach(|| study::variance_study(&cfg)).map_err(to_py)?;
    to_object(py, &rows)
}

/// Rank fidelity of the batch estimate against the exact rank.
#[pyfunction]
#[pyo3(signature = (model, dataset, comparator="mr", max_pairs=5000, bins=10, seed=0))]
fn rank_fidelity<'py>(
    py: Python<'py>,
    model: &PyModel,
    dataset: &PyDataset,
    comparator: &str,
    max_pairs: usize,
    bins: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let kind: Comparator = parse(comparator)?;
    let report = py
        .detach(|| study::rank_fidelity_study(&model.inner, &dataset.inner, kind, max_pairs, bins, seed))
        .map_err(to_py)?;
    to_object(py, &report)
}

#[pymodule]
fn bars(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(comparator, m)?)?;
    m.add_function(wrap_pyfunction!(rank_loss, m)?)?;
    m.add_function(wrap_pyfunction!(rank_loss_grad, m)?)?;
    m.add_function(wrap_pyfunction!(true_rank, m)?)?;
    m.add_function(wrap_pyfunction!(variance_study, m)?)?;
    m.add_function(wrap_pyfunction!(rank_fidelity, m)?)?;
    m.add(
        "ALGORITHMS",
        Algorithm::ALL.iter().map(|a| a.name()).collect::<Vec<_>>(),
    )?;
    Ok(())
}
