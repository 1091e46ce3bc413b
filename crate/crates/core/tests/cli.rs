use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use chrono::{Days, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const BIN: &str = env!("CARGO_BIN_EXE_marketrl");

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    /// Three assets over `days` daily bars with a VIX file and sparse signals.
    fn new(days: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let start = NaiveDate::from_ymd_opt(2020, 1, 1).unwrap();
        let assets = ["AAA", "BBB", "CCC"];
        let mut price = [50.0, 80.0, 120.0];
        let mut ohlcv = String::from("timestamp,asset,open,high,low,close,volume\n");
        let mut vix = String::from("timestamp,asset,value\n");
        let mut signals = String::from("timestamp,asset,sentiment,risk\n");
        for d in 0..days {
            let date = start.checked_add_days(Days::new(d as u64)).unwrap();
            for (k, a) in assets.iter().enumerate() {
                let open = price[k];
                price[k] *= 1.0 + 0.0005 * (k as f64 + 1.0) + rng.random_range(-0.02..0.02);
                let close = price[k];
                let high = open.max(close) * (1.0 + rng.random_range(0.0..0.01));
                let low = open.min(close) * (1.0 - rng.random_range(0.0..0.01));
                let vol = rng.random_range(1e5..1e6f64).round();
                ohlcv.push_str(&format!("{date},{a},{open},{high},{low},{close},{vol}\n"));
                if d % 7 == 0 {
                    let u = rng.random_range(1..=5);
                    let q = rng.random_range(1..=5);
                    signals.push_str(&format!("{date},{a},{u},{q}\n"));
                }
            }
            vix.push_str(&format!("{date},,{}\n", 15.0 + rng.random_range(-3.0..3.0)));
        }
        std::fs::write(root.join("ohlcv.csv"), ohlcv).unwrap();
        std::fs::write(root.join("vix.csv"), vix).unwrap();
        std::fs::write(root.join("signals.csv"), signals).unwrap();
        Fixture { _dir: dir, root }
    }

    fn config(&self, name: &str, body: &str) -> PathBuf {
        let p = self.root.join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    fn run(&self, args: &[&str]) -> Output {
        let out = Command::new(BIN)
            .args(args)
            .arg("--out")
            .arg(self.root.join("runs"))
            .env("RUST_LOG", "warn")
            .output()
            .unwrap();
        out
    }

    fn run_ok(&self, args: &[&str]) -> Output {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "marketrl {args:?} failed:\n{}",
            String::from_utf8_lossy(&out.stderr)
        );
        out
    }

    fn runs(&self) -> PathBuf {
        self.root.join("runs")
    }
}

const SMALL: &str = r#"
seed = 5
[data]
ohlcv = "ohlcv.csv"
vix = "vix.csv"
turbulence_window = 20
[agent]
hidden = [8]
iterations = 3
n_envs = 2
epochs = 2
[env]
max_shares = 10.0
integer_shares = false
"#;

fn read(p: impl AsRef<Path>) -> String {
    std::fs::read_to_string(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

#[test]
fn ingest_writes_ten_indicators_and_split_manifest() {
    let fx = Fixture::new(160);
    let cfg = fx.config("run.toml", SMALL);
    fx.run_ok(&["ingest", "--config", cfg.to_str().unwrap()]);
    let dir = fx.runs().join("ingest-5");
    let features = read(dir.join("features.csv"));
    let header: Vec<&str> = features.lines().next().unwrap().split(',').collect();
    assert_eq!(header.len(), 7 + 10, "{header:?}");
    let split: serde_json::Value = serde_json::from_str(&read(dir.join("split.json"))).unwrap();
    assert_eq!(split["eval_fraction"], 0.15);
    let rows = split["rows"].as_u64().unwrap();
    let eval_rows = split["eval_rows"].as_u64().unwrap();
    assert_eq!(eval_rows, (0.15 * rows as f64).ceil() as u64);
    let boundary = split["boundary"].as_str().unwrap();
    assert!(read(dir.join("eval.csv")).lines().nth(1).unwrap().starts_with(boundary));
    for f in ["manifest.json", "config.resolved.toml", "train.csv"] {
        assert!(dir.join(f).exists(), "{f}");
    }
}

#[test]
fn signals_add_sentiment_and_risk_columns() {
    let fx = Fixture::new(120);
    let cfg = fx.config(
        "run.toml",
        &SMALL.replace("turbulence_window = 20", "turbulence_window = 20\nsignals = \"signals.csv\""),
    );
    fx.run_ok(&["ingest", "--config", cfg.to_str().unwrap()]);
    let features = read(fx.runs().join("ingest-5/features.csv"));
    let header = features.lines().next().unwrap();
    assert!(header.ends_with("sentiment,risk"), "{header}");
}

#[test]
fn bad_path_fails_with_message() {
    let fx = Fixture::new(10);
    let cfg = fx.config("bad.toml", "seed = 1\n[data]\nohlcv = \"missing.csv\"\n");
    let out = fx.run(&["ingest", "--config", cfg.to_str().unwrap()]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("missing.csv") && err.contains("does not exist"), "{err}");
}

#[test]
fn config_errors_are_all_listed() {
    let fx = Fixture::new(10);
    let cfg = fx.config(
        "bad.toml",
        "[data]\nohlcv = \"missing.csv\"\n[env]\ncost_rate = 0.9\ngamma = 2.0\n[agent]\nbatch_size = 0\n",
    );
    let out = fx.run(&["train", "--config", cfg.to_str().unwrap()]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    for needle in ["seed is required", "missing.csv", "cost_rate", "gamma", "batch_size"] {
        assert!(err.contains(needle), "`{needle}` not in:\n{err}");
    }
}

#[test]
fn train_then_backtest_is_deterministic() {
    let fx = Fixture::new(140);
    let cfg = fx.config("run.toml", SMALL);
    let cfg = cfg.to_str().unwrap();
    fx.run_ok(&["train", "--config", cfg, "--run-id", "t1"]);
    fx.run_ok(&["train", "--config", cfg, "--run-id", "t2"]);
    let ckpt = fx.runs().join("t1/agent.json");
    assert_eq!(read(&ckpt), read(fx.runs().join("t2/agent.json")));

    let ck = ckpt.to_str().unwrap();
    fx.run_ok(&["backtest", "--config", cfg, "--checkpoint", ck, "--run-id", "b1"]);
    fx.run_ok(&["backtest", "--config", cfg, "--checkpoint", ck, "--run-id", "b2"]);
    fx.run_ok(&["backtest", "--config", cfg, "--run-id", "b3"]);
    let m1 = read(fx.runs().join("b1/metrics.json"));
    assert_eq!(m1, read(fx.runs().join("b2/metrics.json")));
    assert_eq!(m1, read(fx.runs().join("b3/metrics.json")));
    let metrics: serde_json::Value = serde_json::from_str(&m1).unwrap();
    assert!(metrics["sharpe"].is_f64(), "{m1}");
    let trades = read(fx.runs().join("b1/trades.csv"));
    assert!(trades.starts_with("timestamp,asset,action,executed,price,cost,balance,value"));
}

#[test]
fn report_over_three_runs_has_three_rows() {
    let fx = Fixture::new(140);
    let cfg = fx.config("run.toml", SMALL);
    let cfg = cfg.to_str().unwrap();
    for s in ["1", "2", "3"] {
        fx.run_ok(&["backtest", "--config", cfg, "--seed", s]);
    }
    let runs: Vec<String> = ["1", "2", "3"]
        .iter()
        .map(|s| fx.runs().join(format!("backtest-{s}")).display().to_string())
        .collect();
    let mut args = vec!["report", "--run-id", "cmp"];
    args.extend(runs.iter().map(String::as_str));
    let out = fx.run_ok(&args);
    let csv = read(fx.runs().join("cmp/report.csv"));
    assert_eq!(csv.lines().count(), 1 + 3, "{csv}");
    assert!(csv.lines().next().unwrap().starts_with("model,"));
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 2 + 3);
}

#[test]
fn baselines_are_reported_alongside_the_agent() {
    let fx = Fixture::new(200);
    let cfg = fx.config(
        "run.toml",
        &format!("{SMALL}[baselines]\nenabled = true\nmv_lookback = 30\nmv_rebalance = 5\n"),
    );
    fx.run_ok(&["backtest", "--config", cfg.to_str().unwrap()]);
    let dir = fx.runs().join("backtest-5");
    let agent = read(dir.join("equity.csv")).lines().count();
    let bh = read(dir.join("baselines/buy_and_hold/equity.csv")).lines().count();
    let mv = read(dir.join("baselines/mean_variance/equity.csv")).lines().count();
    assert_eq!(agent, bh);
    assert_eq!(agent, mv);

    let base = dir.join("baselines").display().to_string();
    fx.run_ok(&["report", "--run-id", "cmp", dir.to_str().unwrap(), &base]);
    let csv = read(fx.runs().join("cmp/report.csv"));
    let mut models: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    models.sort_unstable();
    assert_eq!(
        models,
        ["backtest-5", "backtest-5/baselines/buy_and_hold", "backtest-5/baselines/mean_variance"]
    );
}

#[test]
fn rolling_and_ensemble_runs_complete() {
    let fx = Fixture::new(120);
    let body = format!(
        "{SMALL}[protocol]\nmode = \"rolling\"\ntrain = 20\nvalidation = 5\ndays = 3\n\
         [ensemble]\ntrain = 20\nvalidation = 5\ntrade = 5\n\
         [[ensemble.members]]\nalgorithm = \"ppo\"\nhidden = [8]\niterations = 2\nn_envs = 1\nepochs = 1\n\
         [[ensemble.members]]\nalgorithm = \"ddpg\"\nhidden = [8]\nsteps = 200\nlearning_starts = 50\nbatch_size = 16\n"
    );
    let cfg = fx.config("roll.toml", &body);
    fx.run_ok(&["rolling", "--config", cfg.to_str().unwrap()]);
    let cycles: serde_json::Value = serde_json::from_str(&read(fx.runs().join("rolling-5/cycles.json"))).unwrap();
    assert_eq!(cycles.as_array().unwrap().len(), 3);
    assert_eq!(read(fx.runs().join("rolling-5/equity.csv")).lines().count(), 1 + 4);

    fx.run_ok(&["ensemble", "--config", cfg.to_str().unwrap()]);
    let windows: serde_json::Value = serde_json::from_str(&read(fx.runs().join("ensemble-5/windows.json"))).unwrap();
    let w = windows.as_array().unwrap();
    assert!(!w.is_empty());
    for win in w {
        let weights: Vec<f64> = serde_json::from_value(win["weights"].clone()).unwrap();
        assert!((weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn bench_emits_one_row_per_size() {
    let fx = Fixture::new(10);
    let out = fx.run_ok(&[
        "bench", "--seed", "3", "--n-envs", "1", "--horizon", "20", "--workers", "1",
    ]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(stdout.lines().next(), Some("n_envs,samples_per_second"));
    assert_eq!(stdout.lines().count(), 2);
    assert!(stdout.lines().nth(1).unwrap().starts_with("1,"));
}

#[test]
fn bench_sample_counts_repeat() {
    let fx = Fixture::new(10);
    let cfg = fx.config("b.toml", "seed = 4\n[bench]\nn_envs = [1, 2]\nhorizon = 10\nworkers = 1\nmin_seconds = 0.0\n");
    let cfg = cfg.to_str().unwrap();
    fx.run_ok(&["bench", "--config", cfg, "--run-id", "x"]);
    fx.run_ok(&["bench", "--config", cfg, "--run-id", "y"]);
    let samples = |id: &str| {
        let m: serde_json::Value = serde_json::from_str(&read(fx.runs().join(id).join("manifest.json"))).unwrap();
        m["summary"]["samples"].clone()
    };
    assert_eq!(samples("x"), samples("y"));
    assert_eq!(samples("x")["2"], 20);
}
