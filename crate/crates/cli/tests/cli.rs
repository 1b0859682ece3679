use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use twin_harness::report::{write_json, Metric, Report, SeedResult};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_twin"))
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn twin(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn run(command: &str, cfg: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![command, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    twin(&args)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|x| x.unwrap().iter().map(String::from).collect()).collect();
    (header, rows)
}

#[test]
fn consistency_columns_are_monotone_in_n() {
    let dir = tempfile::tempdir().unwrap();
    let o = run("consistency", &config("tiny.toml"), dir.path(), &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (header, rows) = read_csv(&dir.path().join("consistency.csv"));
    assert_eq!(header, ["n", "twin-cp", "sim-soft", "sim-hard", "oracle"]);
    let values: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|c| c.parse().unwrap()).collect()).collect();
    for col in 0..header.len() {
        assert!(values.windows(2).all(|w| w[0][col] <= w[1][col]), "column {}", header[col]);
    }
    let last = values.last().unwrap();
    assert!(last[1..].iter().all(|&h| h == 1.0));
    for r in values.iter().filter(|r| r[0] >= 100.0) {
        assert_eq!(r[4], 1.0);
    }
}

#[test]
fn bench_on_default_config_reaches_the_reduction() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("default.toml");
    std::fs::write(&cfg, "seeds = [1]\n").unwrap();
    let out = dir.path().join("out");
    let o = run("bench", &cfg, &out, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (header, rows) = read_csv(&out.join("bench.csv"));
    let col = |name: &str| header.iter().position(|h| h == name).unwrap();
    for r in &rows {
        let reduction: f64 = r[col("reduction_pct")].parse().unwrap();
        match r[col("inherent_dim")].as_str() {
            "144" => assert!(reduction >= 98.5, "{reduction}"),
            "208" => assert!(reduction >= 99.0, "{reduction}"),
            other => panic!("unexpected H {other}"),
        }
        assert_eq!(r[col("raw_itemized")], r[col("raw_measured")]);
        assert_eq!(r[col("twin_itemized")], r[col("twin_measured")]);
    }
}

#[test]
fn same_config_and_seeds_give_byte_identical_csv() {
    let dir = tempfile::tempdir().unwrap();
    for command in ["train", "serve-sim", "ablation"] {
        let a = dir.path().join(format!("{command}-a"));
        let b = dir.path().join(format!("{command}-b"));
        let oa = bin()
            .env("TWIN_WORKERS", "1")
            .args([command, "--config", config("tiny.toml").to_str().unwrap(), "--out", a.to_str().unwrap()])
            .output()
            .unwrap();
        let ob = bin()
            .env("TWIN_WORKERS", "3")
            .args([command, "--config", config("tiny.toml").to_str().unwrap(), "--out", b.to_str().unwrap()])
            .output()
            .unwrap();
        assert!(oa.status.success() && ob.status.success(), "{}{}", stderr(&oa), stderr(&ob));
        for file in [format!("{command}.csv"), "metrics.csv".to_string()] {
            let x = std::fs::read(a.join(&file)).unwrap();
            let y = std::fs::read(b.join(&file)).unwrap();
            assert_eq!(x, y, "{command}/{file}");
        }
    }
}

#[test]
fn train_writes_log_checkpoints_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let o = run("train", &config("tiny.toml"), dir.path(), &["--seeds", "4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (header, rows) = read_csv(&dir.path().join("train.csv"));
    assert_eq!(header[..4], ["seed", "gsu", "auc", "gauc"]);
    assert_eq!(rows.len(), 3);
    let (log_header, log) = read_csv(&dir.path().join("train_log.csv"));
    assert_eq!(log_header, ["seed", "method", "step", "epoch", "loss", "auc", "gauc"]);
    assert!(log.iter().any(|r| !r[6].is_empty()));
    for gsu in ["twin-cp", "sim-hard", "sim-soft"] {
        assert!(dir.path().join(format!("checkpoints/seed4-{gsu}/manifest.json")).exists());
    }
    let report: Report = serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report.seeds, [4]);
    assert_eq!(report.config_hash.len(), 64);
    assert!(report.counters["train_steps"] > 0);
}

#[test]
fn equivalence_meets_tolerances() {
    let dir = tempfile::tempdir().unwrap();
    let o = run("equivalence", &config("tiny.toml"), dir.path(), &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (_, rows) = read_csv(&dir.path().join("equivalence.csv"));
    assert!(rows.iter().all(|r| r[4] == "true"));
}

#[test]
fn bundled_configs_validate() {
    for name in ["tiny.toml", "desk.toml"] {
        let o = twin(&["validate", "--config", config(name).to_str().unwrap()]);
        assert!(o.status.success(), "{name}: {}", stderr(&o));
    }
}

#[test]
fn missing_seed_list_is_a_named_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "[world]\nn_users = 10\n").unwrap();
    let o = twin(&["validate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("seeds: missing seed list"));
    let o = twin(&["validate", "--config", cfg.to_str().unwrap(), "--seeds", "1,2"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}

#[test]
fn negative_refresh_period_is_a_named_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "seeds = [1]\n[serving.schedule]\ncache_refresh_period = -5.0\n").unwrap();
    let out = dir.path().join("out");
    let o = run("serve-sim", &cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("cache_refresh_period"), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn malformed_inputs_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "seeds = [1]\nunknown_key = 3\n").unwrap();
    assert_eq!(twin(&["validate", "--config", cfg.to_str().unwrap()]).status.code(), Some(1));
    let missing = dir.path().join("nope.toml");
    let o = twin(&["validate", "--config", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("nope.toml"));
    std::fs::write(&cfg, "seeds = [1]\nworld_file = \"absent.toml\"\n").unwrap();
    let o = twin(&["validate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("world_file"));
    assert_eq!(twin(&["train", "--config"]).status.code(), Some(1));
    assert_eq!(twin(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(twin(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_failures_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    let o = run("equivalence", &config("tiny.toml"), &blocker.join("out"), &[]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

fn fabricated(dir: &Path, name: &str, hash: &str, seed: u64, value: f64) -> PathBuf {
    let path = dir.join(name);
    let per_seed = vec![SeedResult {
        seed,
        metrics: vec![Metric::new("twin-cp", "gauc", value), Metric::new("sim-hard", "gauc", value - 0.01)],
    }];
    let report = Report {
        command: "train".into(),
        config_path: "c.toml".into(),
        config_hash: hash.into(),
        seeds: vec![seed],
        aggregate: twin_harness::report::aggregate(&per_seed),
        per_seed,
        wall_clock_seconds: 1.0,
        timings: Default::default(),
        counters: Default::default(),
    };
    write_json(&path, &report).unwrap();
    path
}

#[test]
fn summarize_matches_hand_arithmetic() {
    let dir = tempfile::tempdir().unwrap();
    let h = "a".repeat(64);
    let files: Vec<PathBuf> = [(1, 0.70), (2, 0.74), (3, 0.75)]
        .iter()
        .map(|&(s, v)| fabricated(dir.path(), &format!("r{s}.json"), &h, s, v))
        .collect();
    let out = dir.path().join("summary");
    let mut args = vec!["summarize", "--out", out.to_str().unwrap()];
    args.extend(files.iter().map(|f| f.to_str().unwrap()));
    let o = twin(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let (header, rows) = read_csv(&out.join("summary.csv"));
    assert_eq!(header, ["method", "metric", "n", "mean", "std"]);
    let mean: f64 = rows[0][3].parse().unwrap();
    let std: f64 = rows[0][4].parse().unwrap();
    let m = (0.70 + 0.74 + 0.75) / 3.0;
    let s = (((0.70f64 - m).powi(2) + (0.74f64 - m).powi(2) + (0.75f64 - m).powi(2)) / 2.0).sqrt();
    assert_eq!(rows[0][..3], ["twin-cp", "gauc", "3"]);
    assert!((mean - m).abs() < 1e-12 && (std - s).abs() < 1e-12, "{mean} {std}");
    assert!(out.join("summary.txt").exists());

    let o = twin(&["summarize", files[0].to_str().unwrap()]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("± 0.000000"));
}

#[test]
fn summarize_rejects_missing_files_and_mixed_configs() {
    let dir = tempfile::tempdir().unwrap();
    let a = fabricated(dir.path(), "a.json", &"a".repeat(64), 1, 0.7);
    let b = fabricated(dir.path(), "b.json", &"b".repeat(64), 2, 0.7);
    let missing = dir.path().join("missing.json");
    let o = twin(&["summarize", a.to_str().unwrap(), missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("missing.json"));
    let o = twin(&["summarize", a.to_str().unwrap(), b.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("refusing to mix"));
}

#[test]
fn reports_of_separate_seed_runs_combine() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(run("equivalence", &config("tiny.toml"), &a, &["--seeds", "1"]).status.success());
    assert!(run("equivalence", &config("tiny.toml"), &b, &["--seeds", "2"]).status.success());
    let o = twin(&["summarize", a.join("report.json").to_str().unwrap(), b.join("report.json").to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("[1, 2]"));
}
