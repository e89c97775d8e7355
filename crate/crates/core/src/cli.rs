//! Command-line front end.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{parse_list, RunConfig, Settings};
use crate::data::{
    dataset_stats, load_interactions, split_chronological, split_dir, split_random, write_interactions, AttributePaths,
    InputFormat, InteractionDataset, SplitPair, SplitProtocol,
};
use crate::error::Error;
use crate::eval::{evaluate, EvalReport};
use crate::model::{Checkpoint, FactorModel};
use crate::rank::Comparator;
use crate::study::{rank_fidelity_study, variance_csv, variance_study, ScoreConstruction, VarianceConfig};
use crate::synth::{generate, SynthConfig};
use crate::train::{train, TrainReport};

pub const VERSION: &str = concat!("v", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Parser)]
#[command(
    name = "bars",
    version,
    about = "Mini-batch rank-sensitive training for implicit-feedback recommenders"
)]
pub struct Cli {
    /// Cap on worker threads.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Print summaries as JSON.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load interactions, split them and write a split directory.
    Ingest(IngestArgs),
    /// Train a model on a split directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a split directory.
    Evaluate(EvaluateArgs),
    /// Run an estimator study.
    Simulate(SimulateArgs),
    /// Sweep embedding dimension and learning rate.
    Grid(GridArgs),
    /// Write a synthetic interaction file with planted structure.
    Synth(SynthArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitKind {
    Random,
    Chrono,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value = "random")]
    pub split: SplitKind,
    #[arg(long, default_value_t = 0.3)]
    pub test_frac: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub user_attrs: Option<PathBuf>,
    #[arg(long)]
    pub item_attrs: Option<PathBuf>,
}

/// Training flags; each overrides the matching config key.
#[derive(Debug, Args, Default)]
pub struct TrainFlags {
    /// key = value config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub algo: Option<String>,
    #[arg(long)]
    pub comparator: Option<String>,
    #[arg(long)]
    pub loss: Option<String>,
    #[arg(long = "loss-p")]
    pub loss_p: Option<f64>,
    #[arg(long = "loss-lambda")]
    pub loss_lambda: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub q: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub l2_user: Option<f64>,
    #[arg(long)]
    pub l2_item: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub dev_frac: Option<f64>,
    #[arg(long)]
    pub cutoffs: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl TrainFlags {
    pub fn settings(&self, workers: Option<usize>) -> crate::Result<Settings> {
        let mut s = match &self.config {
            Some(p) => Settings::from_file(p)?,
            None => Settings::default(),
        };
        let overrides: [(&str, Option<String>); 16] = [
            ("algo", self.algo.clone()),
            ("comparator", self.comparator.clone()),
            ("loss", self.loss.clone()),
            ("loss.p", self.loss_p.map(|v| v.to_string())),
            ("loss.lambda", self.loss_lambda.map(|v| v.to_string())),
            ("batch_size", self.batch_size.map(|v| v.to_string())),
            ("q", self.q.map(|v| v.to_string())),
            ("lr", self.lr.map(|v| v.to_string())),
            ("dim", self.dim.map(|v| v.to_string())),
            ("l2_user", self.l2_user.map(|v| v.to_string())),
            ("l2_item", self.l2_item.map(|v| v.to_string())),
            ("epochs", self.epochs.map(|v| v.to_string())),
            ("patience", self.patience.map(|v| v.to_string())),
            ("dev_frac", self.dev_frac.map(|v| v.to_string())),
            ("cutoffs", self.cutoffs.clone()),
            ("seed", self.seed.map(|v| v.to_string())),
        ];
        for (key, value) in overrides {
            if let Some(v) = value {
                s.set(key, v)?;
            }
        }
        if let Some(w) = workers {
            s.set("workers", w.to_string())?;
        }
        Ok(s)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Split directory written by `ingest`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub flags: TrainFlags,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "5,30")]
    pub cutoffs: String,
    /// Keep training positives in the ranked lists.
    #[arg(long)]
    pub no_remove_historical: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Study {
    Variance,
    Fidelity,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, value_enum)]
    pub study: Study,
    /// Item universe size (variance study).
    #[arg(long = "N", default_value_t = 100_000)]
    pub n: usize,
    #[arg(long, default_value = "0.01,0.05,0.1")]
    pub q: String,
    #[arg(long, default_value = "10,100,1000,10000")]
    pub ranks: String,
    #[arg(long, default_value_t = 10_000)]
    pub resamples: usize,
    #[arg(long, default_value = "mr")]
    pub comparator: String,
    #[arg(long, default_value = "gaussian")]
    pub construction: String,
    /// Checkpoint for the fidelity study; a briefly trained synthetic model
    /// is used when absent.
    #[arg(long, requires = "data")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 5000)]
    pub pairs: usize,
    #[arg(long, default_value_t = 10)]
    pub bins: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "10,16,32,48,64")]
    pub dims: String,
    #[arg(long, default_value = "0.5,1,5,10")]
    pub lrs: String,
    #[command(flatten)]
    pub flags: TrainFlags,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 1000)]
    pub users: usize,
    #[arg(long, default_value_t = 2000)]
    pub items: usize,
    #[arg(long, default_value_t = 8.0)]
    pub affinity: f64,
    #[arg(long, default_value_t = 0.8)]
    pub popularity_exponent: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Interaction TSV to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Item attribute TSV to write.
    #[arg(long)]
    pub item_attrs_out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
pub struct DatasetFingerprint {
    pub name: String,
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub sha256: String,
}

impl DatasetFingerprint {
    pub fn of(name: &str, ds: &InteractionDataset) -> Self {
        DatasetFingerprint {
            name: name.to_string(),
            users: ds.num_users(),
            items: ds.num_items(),
            interactions: ds.len(),
            sha256: ds.fingerprint(),
        }
    }
}

/// Provenance record written next to every command's outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub version: String,
    pub command: String,
    pub config: Value,
    pub seed: Option<u64>,
    pub datasets: Vec<DatasetFingerprint>,
    pub outputs: Vec<PathBuf>,
}

pub const MANIFEST: &str = "manifest.json";

impl RunManifest {
    fn new(command: &str, config: Value, seed: Option<u64>) -> Self {
        RunManifest {
            version: VERSION.to_string(),
            command: command.to_string(),
            config,
            seed,
            datasets: Vec::new(),
            outputs: Vec::new(),
        }
    }

    fn write(&self, dir: &Path) -> anyhow::Result<PathBuf> {
        let path = dir.join(MANIFEST);
        fs::write(&path, serde_json::to_string_pretty(self)?)?;
        Ok(path)
    }
}

/// Writes `value` as pretty JSON with a `manifest` reference.
fn write_json<T: Serialize>(path: &Path, value: &T, manifest: &mut RunManifest) -> anyhow::Result<()> {
    let mut v = serde_json::to_value(value)?;
    if let Value::Object(map) = &mut v {
        map.insert("manifest".into(), json!(MANIFEST));
    }
    fs::write(path, serde_json::to_string_pretty(&v)?).with_context(|| format!("writing {}", path.display()))?;
    manifest.outputs.push(path.to_owned());
    Ok(())
}

fn write_text(path: &Path, text: &str, manifest: &mut RunManifest) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    manifest.outputs.push(path.to_owned());
    Ok(())
}

fn emit(json_mode: bool, summary: Value, human: String) {
    if json_mode {
        println!("{summary}");
    } else {
        println!("{human}");
    }
}

/// Runs the parsed command line.
pub fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(w) = cli.workers {
        if w == 0 {
            return Err(Error::config("--workers must be at least 1").into());
        }
        // fails only if a pool already exists, which leaves the earlier cap in place
        let _ = rayon::ThreadPoolBuilder::new().num_threads(w).build_global();
    }
    match cli.command {
        Command::Ingest(a) => cmd_ingest(a, cli.json),
        Command::Train(a) => cmd_train(a, cli.workers, cli.json),
        Command::Evaluate(a) => cmd_evaluate(a, cli.json),
        Command::Simulate(a) => cmd_simulate(a, cli.json),
        Command::Grid(a) => cmd_grid(a, cli.workers, cli.json),
        Command::Synth(a) => cmd_synth(a, cli.json),
    }
}

fn cmd_ingest(a: IngestArgs, json_mode: bool) -> anyhow::Result<()> {
    if !(a.test_frac > 0.0 && a.test_frac < 1.0) {
        return Err(Error::config(format!("--test-frac must lie in (0, 1), got {}", a.test_frac)).into());
    }
    let attrs = AttributePaths {
        user: a.user_attrs.clone(),
        item: a.item_attrs.clone(),
    };
    let ds = load_interactions(&a.input, InputFormat::TsvTriples, &attrs)?;
    let split = match a.split {
        SplitKind::Random => split_random(&ds, a.test_frac, a.seed)?,
        SplitKind::Chrono => split_chronological(&ds, a.test_frac)?,
    };
    split_dir::save(&split, &a.out)?;
    let stats = json!({
        "all": dataset_stats(&ds)?,
        "train": dataset_stats(&split.train)?,
        "test": dataset_stats(&split.test)?,
        "protocol": split.protocol,
    });
    let mut manifest = RunManifest::new(
        "ingest",
        json!({
            "input": a.input,
            "split": format!("{:?}", a.split).to_lowercase(),
            "test_frac": a.test_frac,
            "user_attrs": a.user_attrs,
            "item_attrs": a.item_attrs,
        }),
        Some(a.seed),
    );
    manifest.datasets = vec![
        DatasetFingerprint::of("all", &ds),
        DatasetFingerprint::of("train", &split.train),
        DatasetFingerprint::of("test", &split.test),
    ];
    for f in [split_dir::TRAIN, split_dir::TEST] {
        manifest.outputs.push(a.out.join(f));
    }
    write_json(&a.out.join("stats.json"), &stats, &mut manifest)?;
    manifest.write(&a.out)?;
    emit(
        json_mode,
        stats.clone(),
        format!(
            "{} interactions -> train {} / test {} in {}",
            ds.len(),
            split.train.len(),
            split.test.len(),
            a.out.display()
        ),
    );
    Ok(())
}

fn load_split(dir: &Path) -> anyhow::Result<SplitPair> {
    if !dir.join(split_dir::TRAIN).exists() {
        return Err(Error::data(format!("{} is not a split directory", dir.display())).into());
    }
    Ok(split_dir::load(dir, SplitProtocol::RandomHoldout)?)
}

/// Train on `train` with a dev split carved from it; returns the model
/// restored to its best dev epoch.
fn fit(run: &RunConfig, train_ds: &InteractionDataset) -> crate::Result<(FactorModel, TrainReport)> {
    let mut model = FactorModel::new(&run.model, train_ds.catalog())?;
    let report = if run.dev_frac > 0.0 {
        let inner = split_random(train_ds, run.dev_frac, run.train.seed)?;
        train(&mut model, &inner.train, Some(&inner.test), &run.train, &run.model)?
    } else {
        train(&mut model, train_ds, None, &run.train, &run.model)?
    };
    Ok((model, report))
}

fn cmd_train(a: TrainArgs, workers: Option<usize>, json_mode: bool) -> anyhow::Result<()> {
    let run = a.flags.settings(workers)?.build()?;
    let split = load_split(&a.data)?;
    fs::create_dir_all(&a.out)?;
    let (model, report) = fit(&run, &split.train)?;
    let mut manifest = RunManifest::new("train", serde_json::to_value(&run)?, Some(run.train.seed));
    manifest.datasets = vec![
        DatasetFingerprint::of("train", &split.train),
        DatasetFingerprint::of("test", &split.test),
    ];
    let ckpt = a.out.join("checkpoint.json");
    Checkpoint::new(run.model.clone(), (**split.train.catalog()).clone(), model).save(&ckpt)?;
    manifest.outputs.push(ckpt.clone());
    write_json(&a.out.join("report.json"), &report, &mut manifest)?;
    manifest.write(&a.out)?;
    emit(
        json_mode,
        json!({
            "algorithm": report.algorithm,
            "epochs": report.epochs.len(),
            "best_epoch": report.best_epoch,
            "best_dev_metric": report.best_dev_metric,
            "checkpoint": ckpt,
        }),
        format!(
            "{}: {} epochs, best epoch {:?} ({} {:?}); checkpoint {}",
            report.algorithm,
            report.epochs.len(),
            report.best_epoch,
            report.monitor,
            report.best_dev_metric,
            ckpt.display()
        ),
    );
    Ok(())
}

fn report_summary(r: &EvalReport) -> String {
    let mut parts = Vec::new();
    for (i, k) in r.cutoffs.iter().enumerate() {
        parts.push(format!(
            "P@{k} {:.4} R@{k} {:.4} NDCG@{k} {:.4}",
            r.precision[i], r.recall[i], r.ndcg[i]
        ));
    }
    format!("{} users: {}", r.users_evaluated, parts.join(" | "))
}

fn cmd_evaluate(a: EvaluateArgs, json_mode: bool) -> anyhow::Result<()> {
    if !a.checkpoint.exists() {
        return Err(Error::data(format!("checkpoint {} does not exist", a.checkpoint.display())).into());
    }
    let cutoffs: Vec<usize> = parse_list(&a.cutoffs)?;
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let split = load_split(&a.data)?;
    if **split.train.catalog() != ckpt.catalog {
        return Err(Error::data("checkpoint and split directory use different vocabularies").into());
    }
    let report = evaluate(
        &ckpt.model,
        &split.train,
        &split.test,
        &cutoffs,
        !a.no_remove_historical,
    )?;
    fs::create_dir_all(&a.out)?;
    let mut manifest = RunManifest::new(
        "evaluate",
        json!({"checkpoint": a.checkpoint, "cutoffs": cutoffs, "remove_historical": !a.no_remove_historical}),
        None,
    );
    manifest.datasets = vec![
        DatasetFingerprint::of("train", &split.train),
        DatasetFingerprint::of("test", &split.test),
    ];
    write_json(&a.out.join("eval.json"), &report, &mut manifest)?;
    write_text(&a.out.join("eval.csv"), &report.to_csv(), &mut manifest)?;
    manifest.write(&a.out)?;
    emit(json_mode, serde_json::to_value(&report)?, report_summary(&report));
    Ok(())
}

fn cmd_simulate(a: SimulateArgs, json_mode: bool) -> anyhow::Result<()> {
    let comparator: Comparator = a.comparator.parse()?;
    fs::create_dir_all(&a.out)?;
    match a.study {
        Study::Variance => {
            let cfg = VarianceConfig {
                num_items: a.n,
                true_ranks: parse_list(&a.ranks)?,
                fractions: parse_list(&a.q)?,
                resamples: a.resamples,
                comparator,
                construction: a.construction.parse::<ScoreConstruction>()?,
                seed: a.seed,
            };
            let rows = variance_study(&cfg)?;
            let mut manifest = RunManifest::new("simulate variance", serde_json::to_value(&cfg)?, Some(a.seed));
            write_text(&a.out.join("variance.csv"), &variance_csv(&rows), &mut manifest)?;
            manifest.write(&a.out)?;
            let human = rows
                .iter()
                .map(|r| {
                    format!(
                        "{:<9} q={:<6} rank={:<6} rel_std={:.4}",
                        r.estimator,
                        r.q.map_or("-".into(), |q| q.to_string()),
                        r.true_rank,
                        r.rel_std
                    )
                })
                .collect::<Vec<_>>()
                .join("\n");
            emit(json_mode, serde_json::to_value(&rows)?, human);
        }
        Study::Fidelity => {
            let (model, ds, mut manifest) = match (&a.checkpoint, &a.data) {
                (Some(c), Some(d)) => {
                    let ckpt = Checkpoint::load(c)?;
                    let split = load_split(d)?;
                    let manifest = RunManifest::new(
                        "simulate fidelity",
                        json!({"checkpoint": c, "comparator": comparator.name(), "pairs": a.pairs, "bins": a.bins}),
                        Some(a.seed),
                    );
                    (ckpt.model, split.train, manifest)
                }
                _ => {
                    let ds = generate(&SynthConfig {
                        seed: a.seed,
                        ..SynthConfig::default()
                    })?;
                    let mut settings = Settings::default();
                    settings.set("epochs", "2")?;
                    settings.set("dev_frac", "0")?;
                    settings.set("seed", a.seed.to_string())?;
                    let run = settings.build()?;
                    let (model, _) = fit(&run, &ds)?;
                    let manifest = RunManifest::new(
                        "simulate fidelity",
                        json!({"model": "synthetic, 2 epochs", "run": run, "comparator": comparator.name(), "pairs": a.pairs, "bins": a.bins}),
                        Some(a.seed),
                    );
                    (model, ds, manifest)
                }
            };
            manifest.datasets.push(DatasetFingerprint::of("train", &ds));
            let report = rank_fidelity_study(&model, &ds, comparator, a.pairs, a.bins, a.seed)?;
            write_text(&a.out.join("fidelity_pairs.csv"), &report.pairs_csv(), &mut manifest)?;
            write_text(&a.out.join("fidelity_bins.csv"), &report.bins_csv(), &mut manifest)?;
            manifest.write(&a.out)?;
            emit(
                json_mode,
                json!({"pearson": report.pearson, "bins_monotone": report.bins_monotone(), "pairs": report.pairs.len()}),
                format!(
                    "{} pairs: pearson {:.4}, binned means monotone: {}",
                    report.pairs.len(),
                    report.pearson,
                    report.bins_monotone()
                ),
            );
        }
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct GridRow {
    dim: usize,
    lr: f64,
    epochs: usize,
    best_epoch: Option<usize>,
    dev_ndcg: Option<f64>,
}

fn cmd_grid(a: GridArgs, workers: Option<usize>, json_mode: bool) -> anyhow::Result<()> {
    let dims: Vec<usize> = parse_list(&a.dims)?;
    let lrs: Vec<f64> = parse_list(&a.lrs)?;
    let base = a.flags.settings(workers)?;
    let split = load_split(&a.data)?;
    fs::create_dir_all(&a.out)?;
    let mut rows = Vec::new();
    for &dim in &dims {
        for &lr in &lrs {
            let mut s = base.clone();
            s.set("dim", dim.to_string())?;
            s.set("lr", lr.to_string())?;
            let run = s.build()?;
            if run.dev_frac == 0.0 {
                return Err(Error::config("grid search needs dev_frac > 0").into());
            }
            let (_, report) = fit(&run, &split.train)?;
            log::info!("grid dim={dim} lr={lr}: {:?}", report.best_dev_metric);
            rows.push(GridRow {
                dim,
                lr,
                epochs: report.epochs.len(),
                best_epoch: report.best_epoch,
                dev_ndcg: report.best_dev_metric,
            });
        }
    }
    let best = rows
        .iter()
        .filter(|r| r.dev_ndcg.is_some())
        .max_by(|x, y| x.dev_ndcg.partial_cmp(&y.dev_ndcg).expect("finite metrics"));
    let mut csv = String::from("dim,lr,epochs,best_epoch,dev_ndcg\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            r.dim,
            r.lr,
            r.epochs,
            r.best_epoch.map_or(String::new(), |e| e.to_string()),
            r.dev_ndcg.map_or(String::new(), |v| v.to_string())
        ));
    }
    let mut manifest = RunManifest::new("grid", json!({"base": base.build()?, "dims": dims, "lrs": lrs}), None);
    manifest.datasets.push(DatasetFingerprint::of("train", &split.train));
    write_text(&a.out.join("grid.csv"), &csv, &mut manifest)?;
    manifest.write(&a.out)?;
    emit(
        json_mode,
        json!({"rows": rows, "best": best}),
        match best {
            Some(b) => format!("best dim={} lr={} dev ndcg {:?}", b.dim, b.lr, b.dev_ndcg),
            None => "no dev metric recorded".into(),
        },
    );
    Ok(())
}

fn cmd_synth(a: SynthArgs, json_mode: bool) -> anyhow::Result<()> {
    let cfg = SynthConfig {
        users: a.users,
        items: a.items,
        affinity: a.affinity,
        popularity_exponent: a.popularity_exponent,
        seed: a.seed,
        ..SynthConfig::default()
    };
    let ds = generate(&cfg)?;
    write_interactions(&ds, &a.out)?;
    if let Some(p) = &a.item_attrs_out {
        let cat = ds.catalog();
        let mut out = String::new();
        for i in 0..cat.num_items() {
            for &g in cat.item_attributes(i) {
                out.push_str(&format!(
                    "{}\t{}\n",
                    cat.items.token(i).unwrap_or_default(),
                    cat.item_attr_vocab.token(g).unwrap_or_default()
                ));
            }
        }
        fs::write(p, out)?;
    }
    emit(
        json_mode,
        json!({"stats": dataset_stats(&ds)?, "sha256": ds.fingerprint()}),
        format!("wrote {} interactions to {}", ds.len(), a.out.display()),
    );
    Ok(())
}

/// Process exit code for an error returned by [`run`].
pub fn exit_code(err: &anyhow::Error) -> i32 {
    match err.downcast_ref::<Error>() {
        Some(e) => e.exit_code(),
        None => 3,
    }
}
