//! Flat `key = value` run configuration.
//!
//! ```text
//! # comments and blank lines are ignored
//! algo = bars
//! comparator = smr
//! loss = log
//! q = 0.1
//! ```
//!
//! Recognized keys:
//!
//! | key | meaning | default |
//! |---|---|---|
//! | `algo` | bars, warp, bpr, bbpr, ce | bars |
//! | `comparator` | mr, smr, sr (bars only) | smr |
//! | `loss` | owa, poly, log, exp, bpr, bbpr, ce | matches `algo` |
//! | `loss.p` | polynomial exponent | 0.5 |
//! | `loss.lambda` | exponential base | 2 |
//! | `batch_size` | observations per step | 64 |
//! | `q` | item sample fraction | 0.1 |
//! | `lr` | learning rate | 1 |
//! | `dim` | embedding dimension | 32 |
//! | `init_scale` | uniform init half-width | 0.05 |
//! | `l2_user`, `l2_item` | L2 coefficients | 0 |
//! | `epochs` | maximum epochs | 20 |
//! | `patience` | early-stop patience | 3 |
//! | `dev_frac` | dev fraction carved from train | 0.05 |
//! | `cutoffs` | comma list of evaluation cutoffs | 5,30 |
//! | `monitor_cutoff` | NDCG cutoff used for early stopping | 30 |
//! | `seed` | seed of every random stream | 0 |
//! | `workers` | worker thread cap | all cores |
//!
//! Values set later (e.g. from command-line flags) override earlier ones.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{LossFamily, LossSpec};
use crate::model::ModelConfig;
use crate::train::{Algorithm, TrainConfig};

pub const KEYS: [&str; 19] = [
    "algo",
    "comparator",
    "loss",
    "loss.p",
    "loss.lambda",
    "batch_size",
    "q",
    "lr",
    "dim",
    "init_scale",
    "l2_user",
    "l2_item",
    "epochs",
    "patience",
    "dev_frac",
    "cutoffs",
    "monitor_cutoff",
    "seed",
    "workers",
];

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    pub fn parse(text: &str) -> Result<Self> {
        let mut settings = Settings::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("config line {}: expected key = value", n + 1)))?;
            settings.set(key.trim(), value.trim())?;
        }
        Ok(settings)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<()> {
        if !KEYS.contains(&key) {
            return Err(Error::config(format!("unknown config key `{key}`")));
        }
        self.values.insert(key.to_string(), value.into());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    fn parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.get(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|_| Error::config(format!("invalid value `{v}` for `{key}`")))
            })
            .transpose()
    }

    pub fn build(&self) -> Result<RunConfig> {
        let algorithm = match self.get("algo") {
            Some(a) => a.parse()?,
            None => Algorithm::Bars,
        };
        let mut train = TrainConfig::for_algorithm(algorithm);
        if let Some(c) = self.get("comparator") {
            train.comparator = c.parse()?;
        }
        let family: LossFamily = match self.get("loss") {
            Some(l) => l.parse()?,
            None => algorithm.default_loss(),
        };
        train.loss = LossSpec::new(family);
        if let Some(p) = self.parsed("loss.p")? {
            train.loss.p = p;
        }
        if let Some(l) = self.parsed("loss.lambda")? {
            train.loss.lambda = l;
        }
        if let Some(v) = self.parsed("batch_size")? {
            train.batch_size = v;
        }
        if let Some(v) = self.parsed("q")? {
            train.q = v;
        }
        if let Some(v) = self.parsed("lr")? {
            train.learning_rate = v;
        }
        if let Some(v) = self.parsed("epochs")? {
            train.max_epochs = v;
        }
        if let Some(v) = self.parsed("patience")? {
            train.patience = v;
        }
        if let Some(v) = self.get("cutoffs") {
            train.eval_cutoffs = parse_list(v)?;
        }
        if let Some(v) = self.parsed("monitor_cutoff")? {
            train.monitor_cutoff = v;
        }
        let seed = self.parsed("seed")?.unwrap_or(0);
        train.seed = seed;
        let mut model = ModelConfig {
            seed,
            ..ModelConfig::default()
        };
        if let Some(v) = self.parsed("dim")? {
            model.dim = v;
        }
        if let Some(v) = self.parsed("init_scale")? {
            model.init_scale = v;
        }
        if let Some(v) = self.parsed("l2_user")? {
            model.l2_user = v;
        }
        if let Some(v) = self.parsed("l2_item")? {
            model.l2_item = v;
        }
        let dev_frac = self.parsed("dev_frac")?.unwrap_or(0.05);
        if !(0.0..1.0).contains(&dev_frac) {
            return Err(Error::config(format!("dev_frac must lie in [0, 1), got {dev_frac}")));
        }
        let workers = self.parsed("workers")?;
        if workers == Some(0) {
            return Err(Error::config("workers must be at least 1"));
        }
        train.validate()?;
        model.validate()?;
        Ok(RunConfig {
            train,
            model,
            dev_frac,
            workers,
        })
    }
}

/// Comma-separated list, e.g. `5,30`.
pub fn parse_list<T: FromStr>(text: &str) -> Result<Vec<T>> {
    text.split(',')
        .map(|s| {
            let s = s.trim();
            s.parse()
                .map_err(|_| Error::config(format!("invalid list element `{s}` in `{text}`")))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub dev_frac: f64,
    pub workers: Option<usize>,
}
