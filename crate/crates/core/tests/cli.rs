use std::fs;
use std::path::Path;
use std::process::Command;

use serde_json::Value;

fn bars() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_bars"));
    c.env("RUST_LOG", "warn");
    c
}

fn write_toy(dir: &Path, with_time: bool) -> std::path::PathBuf {
    let mut text = String::from("# user item time\n");
    let mut t = 0;
    for u in 0..30 {
        for k in 0..6 {
            t += 1;
            let item = (u * 7 + k * 11) % 40;
            if with_time {
                text.push_str(&format!("u{u}\ti{item}\t{t}\n"));
            } else {
                text.push_str(&format!("u{u}\ti{item}\n"));
            }
        }
    }
    let p = dir.join(if with_time { "timed.tsv" } else { "plain.tsv" });
    fs::write(&p, text).unwrap();
    p
}

fn ingest(dir: &Path, input: &Path, out: &str) -> std::process::Output {
    bars()
        .args(["ingest", "--input"])
        .arg(input)
        .args(["--split", "random", "--test-frac", "0.3", "--seed", "7", "--out"])
        .arg(dir.join(out))
        .output()
        .unwrap()
}

#[test]
fn ingest_is_deterministic_and_writes_stats() {
    let tmp = tempfile::tempdir().unwrap();
    let input = write_toy(tmp.path(), false);
    for out in ["a", "b"] {
        let o = ingest(tmp.path(), &input, out);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["train.tsv", "test.tsv", "users.vocab", "items.vocab"] {
        assert_eq!(
            fs::read(tmp.path().join("a").join(f)).unwrap(),
            fs::read(tmp.path().join("b").join(f)).unwrap()
        );
    }
    let stats: Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("a/stats.json")).unwrap()).unwrap();
    assert_eq!(stats["all"]["interactions"], 180);
    let n = stats["train"]["interactions"].as_u64().unwrap() + stats["test"]["interactions"].as_u64().unwrap();
    assert_eq!(n, 180);
    let manifest: Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("a/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["datasets"].as_array().unwrap().len(), 3);
}

#[test]
fn chronological_split_needs_timestamps() {
    let tmp = tempfile::tempdir().unwrap();
    let input = write_toy(tmp.path(), false);
    let o = bars()
        .args(["ingest", "--input"])
        .arg(&input)
        .args(["--split", "chrono", "--out"])
        .arg(tmp.path().join("c"))
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("timestamp"));

    let timed = write_toy(tmp.path(), true);
    let o = bars()
        .args(["ingest", "--input"])
        .arg(&timed)
        .args(["--split", "chrono", "--test-frac", "0.2", "--out"])
        .arg(tmp.path().join("c"))
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn train_then_evaluate() {
    let tmp = tempfile::tempdir().unwrap();
    let input = write_toy(tmp.path(), false);
    assert!(ingest(tmp.path(), &input, "split").status.success());
    let run = tmp.path().join("run");
    let o = bars()
        .args(["--json", "--workers", "1", "train", "--data"])
        .arg(tmp.path().join("split"))
        .arg("--out")
        .arg(&run)
        .args([
            "--algo",
            "bars",
            "--comparator",
            "smr",
            "--loss",
            "log",
            "--q",
            "0.5",
            "--dim",
            "4",
            "--epochs",
            "3",
            "--lr",
            "0.5",
        ])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary["algorithm"], "bars");
    let report: Value = serde_json::from_str(&fs::read_to_string(run.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["manifest"], "manifest.json");
    assert!(!report["epochs"].as_array().unwrap().is_empty());

    let ev = tmp.path().join("eval");
    let o = bars()
        .args(["--json", "evaluate", "--checkpoint"])
        .arg(run.join("checkpoint.json"))
        .arg("--data")
        .arg(tmp.path().join("split"))
        .arg("--out")
        .arg(&ev)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let with: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(with["cutoffs"], serde_json::json!([5, 30]));
    assert_eq!(with["remove_historical"], true);
    let csv = fs::read_to_string(ev.join("eval.csv")).unwrap();
    assert!(csv.starts_with("metric,k,value\n"));

    let o = bars()
        .args(["--json", "evaluate", "--no-remove-historical", "--checkpoint"])
        .arg(run.join("checkpoint.json"))
        .arg("--data")
        .arg(tmp.path().join("split"))
        .arg("--out")
        .arg(&ev)
        .output()
        .unwrap();
    let without: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(without["remove_historical"], false);
}

#[test]
fn warp_training_records_trials() {
    let tmp = tempfile::tempdir().unwrap();
    let input = write_toy(tmp.path(), false);
    assert!(ingest(tmp.path(), &input, "split").status.success());
    let run = tmp.path().join("run");
    let o = bars()
        .args([
            "train", "--algo", "warp", "--lr", "0.05", "--epochs", "2", "--dim", "4", "--data",
        ])
        .arg(tmp.path().join("split"))
        .arg("--out")
        .arg(&run)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: Value = serde_json::from_str(&fs::read_to_string(run.join("report.json")).unwrap()).unwrap();
    assert!(report["epochs"][0]["mean_trials"].as_f64().unwrap() >= 1.0);
}

#[test]
fn config_errors_exit_with_code_two() {
    let tmp = tempfile::tempdir().unwrap();
    let input = write_toy(tmp.path(), false);
    assert!(ingest(tmp.path(), &input, "split").status.success());
    let o = bars()
        .args(["train", "--algo", "bpr", "--loss", "exp", "--data"])
        .arg(tmp.path().join("split"))
        .arg("--out")
        .arg(tmp.path().join("run"))
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));

    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, "algo = bars\nloss = poly\nloss.p = 2\n").unwrap();
    let o = bars()
        .args(["train", "--config"])
        .arg(&cfg)
        .arg("--data")
        .arg(tmp.path().join("split"))
        .arg("--out")
        .arg(tmp.path().join("run"))
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));

    let o = bars()
        .args(["simulate", "--study", "nonsense", "--out"])
        .arg(tmp.path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_checkpoint_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let input = write_toy(tmp.path(), false);
    assert!(ingest(tmp.path(), &input, "split").status.success());
    let o = bars()
        .args(["evaluate", "--checkpoint"])
        .arg(tmp.path().join("nope.json"))
        .arg("--data")
        .arg(tmp.path().join("split"))
        .arg("--out")
        .arg(tmp.path().join("ev"))
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn variance_simulation_writes_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let o = bars()
        .args([
            "simulate",
            "--study",
            "variance",
            "--N",
            "2000",
            "--q",
            "0.05,0.1",
            "--ranks",
            "10,100",
            "--resamples",
            "200",
            "--out",
        ])
        .arg(tmp.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(tmp.path().join("variance.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("estimator,q,true_rank,mean,std,rel_std"));
    assert_eq!(lines.count(), 6);
}

#[test]
fn synth_then_grid() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("synth.tsv");
    let attrs = tmp.path().join("genres.tsv");
    let o = bars()
        .args(["synth", "--users", "40", "--items", "60", "--seed", "2", "--out"])
        .arg(&data)
        .arg("--item-attrs-out")
        .arg(&attrs)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = bars()
        .args(["ingest", "--input"])
        .arg(&data)
        .arg("--item-attrs")
        .arg(&attrs)
        .arg("--out")
        .arg(tmp.path().join("split"))
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = bars()
        .args(["grid", "--dims", "4,8", "--lrs", "0.5,1", "--epochs", "2", "--data"])
        .arg(tmp.path().join("split"))
        .arg("--out")
        .arg(tmp.path().join("grid"))
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(tmp.path().join("grid/grid.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
}
