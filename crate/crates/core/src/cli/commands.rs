use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use serde_json::json;

use super::config::RunConfig;
use crate::agents::{ActionSpace, AgentSpec, FrozenAgent, GaussianPolicy, RlAgent, TrainedAgent};
use crate::ensemble::run_rolling_ensemble;
use crate::env::{MarketData, TradingEnv};
use crate::evalx::{
    buy_and_hold, compute_metrics, mean_variance_strategy, run_protocol, save_trade_log, EquityCurve, MetricsReport,
    TradingAgent,
};
use crate::marketdata::{
    compute_indicators, load_aux_series, load_ohlcv, select_features, split_temporal, FeaturePanel, FeatureSelection,
    Indicator, IndicatorSpec,
};
use crate::seeds;
use crate::signals::{align_signals, load_signals};
use crate::vecenv::{benchmark_sampling, count_inversions, write_bench_csv};

pub const MANIFEST: &str = "manifest.json";
pub const RESOLVED_CONFIG: &str = "config.resolved.toml";
pub const METRICS: &str = "metrics.json";

/// Output directory of one run plus the files written into it.
pub struct RunDir {
    pub path: PathBuf,
    command: String,
    run_id: String,
    seed: Option<u64>,
    files: Vec<String>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    run_id: &'a str,
    seed: Option<u64>,
    version: &'a str,
    files: &'a [String],
    summary: serde_json::Value,
}

impl RunDir {
    pub fn create(out: &Path, command: &str, run_id: &str, seed: Option<u64>) -> anyhow::Result<Self> {
        let path = out.join(run_id);
        std::fs::create_dir_all(&path).with_context(|| format!("cannot create {}", path.display()))?;
        Ok(RunDir {
            path,
            command: command.to_string(),
            run_id: run_id.to_string(),
            seed,
            files: Vec::new(),
        })
    }

    pub fn file(&mut self, name: &str) -> anyhow::Result<PathBuf> {
        let p = self.path.join(name);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent)?;
        }
        self.files.push(name.to_string());
        Ok(p)
    }

    pub fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
        let p = self.file(name)?;
        std::fs::write(&p, contents).with_context(|| format!("cannot write {}", p.display()))
    }

    fn write_metrics(&mut self, name: &str, m: &MetricsReport) -> anyhow::Result<()> {
        self.write(name, m.to_json()? + "\n")
    }

    fn write_curve(&mut self, name: &str, c: &EquityCurve) -> anyhow::Result<()> {
        let p = self.file(name)?;
        Ok(c.save_csv(p)?)
    }

    pub fn finish(mut self, summary: serde_json::Value) -> anyhow::Result<PathBuf> {
        self.files.sort();
        self.files.dedup();
        let m = Manifest {
            command: &self.command,
            run_id: &self.run_id,
            seed: self.seed,
            version: env!("CARGO_PKG_VERSION"),
            files: &self.files,
            summary,
        };
        let text = serde_json::to_string_pretty(&m)? + "\n";
        std::fs::write(self.path.join(MANIFEST), text)?;
        Ok(self.path)
    }
}

/// Creates the run directory and stores the resolved configuration.
pub fn start_run(cfg: &RunConfig, command: &str, out: &Path) -> anyhow::Result<RunDir> {
    cfg.validate(command)?;
    let run_id = cfg
        .run_id
        .clone()
        .unwrap_or_else(|| format!("{command}-{}", cfg.seed.unwrap_or(0)));
    let mut dir = RunDir::create(out, command, &run_id, cfg.seed)?;
    dir.write(RESOLVED_CONFIG, cfg.to_toml()?)?;
    Ok(dir)
}

/// The feature panel the run works on, and the selection report when
/// correlation-based selection ran.
pub fn load_panel(cfg: &RunConfig) -> anyhow::Result<(FeaturePanel, Option<FeatureSelection>)> {
    let d = &cfg.data;
    if let Some(p) = &d.features {
        return Ok((FeaturePanel::load_csv(p)?, None));
    }
    let Some(path) = &d.ohlcv else {
        bail!("data.ohlcv or data.features must be set");
    };
    let panel = load_ohlcv(path, &d.schema)?;
    let mut spec = if d.indicators.is_empty() {
        IndicatorSpec {
            indicators: Indicator::default_set()
                .into_iter()
                .filter(|i| *i != Indicator::Vix || d.vix.is_some())
                .collect(),
            ..Default::default()
        }
    } else {
        IndicatorSpec::from_names(&d.indicators)?
    };
    spec.turbulence_window = d.turbulence_window;
    if let Some(v) = &d.vix {
        spec.vix = Some(load_aux_series(v)?);
    }
    let mut fp = compute_indicators(&panel, &spec)?;
    let mut selection = None;
    if let Some(th) = d.select_threshold {
        let sel = select_features(&fp, th)?;
        let mut keep = sel.selected.clone();
        if fp.feature_index(crate::env::TURBULENCE_FEATURE).is_some()
            && !keep.iter().any(|n| n == crate::env::TURBULENCE_FEATURE)
        {
            keep.push(crate::env::TURBULENCE_FEATURE.to_string());
        }
        fp = fp.select(&keep)?;
        selection = Some(sel);
    }
    if let Some(s) = &d.signals {
        fp = align_signals(&load_signals(s)?, &fp, d.signal_fill)?;
    }
    Ok((fp, selection))
}

pub fn ingest(cfg: &RunConfig, out: &Path) -> anyhow::Result<PathBuf> {
    let mut dir = start_run(cfg, "ingest", out)?;
    let (fp, selection) = load_panel(cfg)?;
    let split = split_temporal(&fp, cfg.eval_fraction())?;
    fp.save_csv(dir.file("features.csv")?)?;
    split.train.save_csv(dir.file("train.csv")?)?;
    if let Some(e) = &split.eval {
        e.save_csv(dir.file("eval.csv")?)?;
    }
    let fmt = fp.base().time_format();
    let ts = fp.base().timestamps();
    let split_manifest = json!({
        "rows": ts.len(),
        "assets": fp.base().assets(),
        "features": fp.feature_names(),
        "eval_fraction": cfg.eval_fraction(),
        "train_rows": split.train.base().n_times(),
        "eval_rows": split.eval_len(),
        "first_timestamp": ts.first().map(|t| t.format(fmt)),
        "last_timestamp": ts.last().map(|t| t.format(fmt)),
        "boundary": split.boundary.map(|t| t.format(fmt)),
    });
    dir.write("split.json", serde_json::to_string_pretty(&split_manifest)? + "\n")?;
    if let Some(sel) = &selection {
        dir.write("selection.json", serde_json::to_string_pretty(sel)? + "\n")?;
    }
    info!(
        "ingested {} rows x {} assets, {} features",
        fp.base().n_times(),
        fp.base().n_assets(),
        fp.n_features()
    );
    dir.finish(split_manifest)
}

fn agent_spec(cfg: &RunConfig, seed: u64, index: u64) -> AgentSpec {
    AgentSpec {
        seed: seeds::derive_seed(seed, seeds::AGENT, index),
        ..cfg.agent.clone()
    }
}

fn write_training_log(dir: &mut RunDir, agent: &TrainedAgent) -> anyhow::Result<()> {
    let p = dir.file("training_log.csv")?;
    let mut w = csv::Writer::from_path(&p)?;
    for r in &agent.log {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn train(cfg: &RunConfig, out: &Path) -> anyhow::Result<PathBuf> {
    let mut dir = start_run(cfg, "train", out)?;
    let seed = cfg.seed()?;
    let (fp, _) = load_panel(cfg)?;
    let split = split_temporal(&fp, cfg.eval_fraction())?;
    let data = Arc::new(MarketData::from_panel(&split.train)?);
    let mut agent = RlAgent::new(agent_spec(cfg, seed, 0), cfg.env.clone());
    agent.fit(&data, None)?;
    let trained = agent.into_trained().context("training produced no agent")?;
    trained.save(dir.file("agent.json")?)?;
    write_training_log(&mut dir, &trained)?;
    let summary = json!({
        "algorithm": trained.algorithm().name(),
        "train_rows": data.n_times(),
        "updates": trained.updates,
        "first_mean_return": trained.log.first().map(|r| r.mean_return),
        "last_mean_return": trained.log.last().map(|r| r.mean_return),
    });
    info!("trained {} with {} updates", trained.algorithm(), trained.updates);
    dir.finish(summary)
}

pub fn backtest(cfg: &RunConfig, out: &Path) -> anyhow::Result<PathBuf> {
    let mut dir = start_run(cfg, "backtest", out)?;
    let seed = cfg.seed()?;
    let (fp, _) = load_panel(cfg)?;
    let data = Arc::new(MarketData::from_panel(&fp)?);
    let checkpoint = cfg.checkpoint.as_ref().map(TrainedAgent::load).transpose()?;
    let env_cfg = cfg.env.clone();
    let spec = agent_spec(cfg, seed, 0);
    let factory = move |_cycle: usize| -> crate::Result<Box<dyn TradingAgent>> {
        Ok(match &checkpoint {
            Some(a) => Box::new(FrozenAgent(a.clone())),
            None => Box::new(RlAgent::new(spec.clone(), env_cfg.clone())),
        })
    };
    let run = run_protocol(&cfg.protocol, &factory, &data, &cfg.env, &cfg.metrics)?;
    dir.write_metrics(METRICS, &run.metrics)?;
    dir.write_curve("equity.csv", &run.equity)?;
    save_trade_log(&run.trades, dir.file("trades.csv")?)?;
    if cfg.baselines.enabled {
        write_baselines(cfg, &mut dir, &data, data.n_times() - run.equity.len())?;
    }
    info!("backtest over {} periods", run.equity.len().saturating_sub(1));
    dir.finish(json!({
        "eval_periods": run.equity.len().saturating_sub(1),
        "frozen_updates": run.frozen_updates,
        "metrics": run.metrics,
    }))
}

/// Buy-and-hold and mean-variance over the same window as the agent's
/// evaluation, which starts at row `start`.
fn write_baselines(cfg: &RunConfig, dir: &mut RunDir, data: &MarketData, start: usize) -> anyhow::Result<()> {
    let b = &cfg.baselines;
    let initial = cfg.env.initial_balance;
    let window = data.slice(start..data.n_times());
    let bh = buy_and_hold(&window, initial, cfg.env.cost_rate)?;
    dir.write_metrics("baselines/buy_and_hold/metrics.json", &compute_metrics(&bh, &cfg.metrics)?)?;
    dir.write_curve("baselines/buy_and_hold/equity.csv", &bh)?;
    if start >= b.mv_lookback {
        let hist = data.slice(start - b.mv_lookback..data.n_times());
        let mv = mean_variance_strategy(&hist, b.mv_lookback, b.mv_rebalance, b.mv_cap, initial, cfg.env.cost_rate)?;
        dir.write_metrics("baselines/mean_variance/metrics.json", &compute_metrics(&mv, &cfg.metrics)?)?;
        dir.write_curve("baselines/mean_variance/equity.csv", &mv)?;
    } else {
        log::warn!("mean-variance baseline skipped: only {start} rows before the evaluation window");
    }
    Ok(())
}

pub fn rolling(cfg: &RunConfig, out: &Path) -> anyhow::Result<PathBuf> {
    let mut dir = start_run(cfg, "rolling", out)?;
    let seed = cfg.seed()?;
    let (fp, _) = load_panel(cfg)?;
    let data = Arc::new(MarketData::from_panel(&fp)?);
    let env_cfg = cfg.env.clone();
    let base = cfg.clone();
    let factory = move |cycle: usize| -> crate::Result<Box<dyn TradingAgent>> {
        Ok(Box::new(RlAgent::new(agent_spec(&base, seed, cycle as u64), env_cfg.clone())))
    };
    let run = run_protocol(&cfg.protocol, &factory, &data, &cfg.env, &cfg.metrics)?;
    dir.write_metrics(METRICS, &run.metrics)?;
    dir.write_curve("equity.csv", &run.equity)?;
    save_trade_log(&run.trades, dir.file("trades.csv")?)?;
    dir.write("cycles.json", serde_json::to_string_pretty(&run.cycles)? + "\n")?;
    info!("rolling run over {} cycles", run.cycles.len());
    dir.finish(json!({ "cycles": run.cycles.len(), "metrics": run.metrics }))
}

pub fn ensemble(cfg: &RunConfig, out: &Path) -> anyhow::Result<PathBuf> {
    let mut dir = start_run(cfg, "ensemble", out)?;
    let seed = cfg.seed()?;
    let (fp, _) = load_panel(cfg)?;
    let data = Arc::new(MarketData::from_panel(&fp)?);
    let run = run_rolling_ensemble(&cfg.ensemble, &data, &cfg.env, seed)?;
    let metrics = compute_metrics(&run.equity, &cfg.metrics)?;
    dir.write_metrics(METRICS, &metrics)?;
    dir.write_curve("equity.csv", &run.equity)?;
    save_trade_log(&run.trades, dir.file("trades.csv")?)?;
    dir.write("windows.json", serde_json::to_string_pretty(&run.windows)? + "\n")?;
    for (i, m) in run.last_policy.members.iter().enumerate() {
        m.save(dir.file(&format!("members/member-{i}-{}.json", m.algorithm()))?)?;
    }
    info!("ensemble run over {} windows", run.windows.len());
    dir.finish(json!({ "windows": run.windows.len(), "metrics": metrics }))
}

/// A seeded geometric random walk used when no data is configured.
pub fn toy_market(n_assets: usize, n_times: usize, seed: u64) -> crate::Result<MarketData> {
    let mut rng = seeds::stream_rng(seed, seeds::DATA_PERTURBATION, 0);
    let mut p: Vec<f64> = (0..n_assets).map(|_| rng.random_range(20.0..200.0)).collect();
    let rows: Vec<Vec<f64>> = (0..n_times)
        .map(|_| {
            let row = p.clone();
            for v in p.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v *= (0.0002 + 0.01 * z).exp();
            }
            row
        })
        .collect();
    MarketData::from_prices(&rows)
}

pub fn bench(cfg: &RunConfig, out: &Path) -> anyhow::Result<PathBuf> {
    let mut dir = start_run(cfg, "bench", out)?;
    let seed = cfg.seed()?;
    let b = &cfg.bench;
    let data = if cfg.data.ohlcv.is_some() || cfg.data.features.is_some() {
        Arc::new(MarketData::from_panel(&load_panel(cfg)?.0)?)
    } else {
        Arc::new(toy_market(4, b.horizon + 1, seed)?)
    };
    let k = data.n_assets();
    let space = ActionSpace::for_trading(&cfg.env, k);
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive_seed(seed, seeds::AGENT, 0));
    let policy = GaussianPolicy::new(
        data.state_dim(),
        space.env_dim(),
        &cfg.agent.hidden,
        cfg.agent.activation,
        cfg.agent.init_log_std,
        cfg.env.max_shares,
        false,
        &mut rng,
    );
    let workers = if b.workers == 0 {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    } else {
        b.workers
    };
    let env_cfg = cfg.env.clone();
    let rows = benchmark_sampling(
        |_| TradingEnv::new(data.clone(), env_cfg.clone()),
        &policy,
        &b.n_envs,
        b.horizon.min(data.n_times() - 1),
        workers,
        b.min_seconds,
        seeds::derive_seed(seed, seeds::ROLLOUT, 0),
    )?;
    let p = dir.file("bench.csv")?;
    write_bench_csv(&rows, std::fs::File::create(&p)?)?;
    let mut stdout = std::io::stdout().lock();
    write_bench_csv(&rows, &mut stdout)?;
    let inversions = count_inversions(&rows);
    let speedup = match (rows.first(), rows.last()) {
        (Some(a), Some(z)) if rows.len() > 1 => Some(z.samples_per_second / a.samples_per_second),
        _ => None,
    };
    info!("{inversions} throughput inversions across {} sizes", rows.len());
    dir.finish(json!({
        "workers": workers,
        "horizon": b.horizon,
        "inversions": inversions,
        "monotone_allowing_one_inversion": inversions <= 1,
        "speedup_last_over_first": speedup,
        "samples": rows.iter().map(|r| (r.n_envs.to_string(), r.samples)).collect::<BTreeMap<_, _>>(),
    }))
}

/// One row of a comparison table: a label and its metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub model: String,
    pub metrics: MetricsReport,
}

/// Every `metrics.json` under the given run directories, labeled by its
/// directory relative to the run's parent. A file reachable from several of
/// the given directories is listed once, under the first.
pub fn collect_reports(runs: &[PathBuf]) -> anyhow::Result<Vec<ReportRow>> {
    let mut rows = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for run in runs {
        if !run.is_dir() {
            bail!("{} is not a run directory", run.display());
        }
        let label = run.file_name().map_or_else(|| run.display().to_string(), |n| n.to_string_lossy().into_owned());
        let mut found = Vec::new();
        find_metrics(run, &mut found)?;
        if found.is_empty() {
            bail!("{} contains no {METRICS}", run.display());
        }
        found.sort();
        for path in found {
            if !seen.insert(path.canonicalize()?) {
                continue;
            }
            let rel = path.parent().and_then(|p| p.strip_prefix(run).ok()).unwrap_or(Path::new(""));
            let model = if rel.as_os_str().is_empty() {
                label.clone()
            } else {
                format!("{label}/{}", rel.display())
            };
            let text = std::fs::read_to_string(&path)?;
            let metrics = MetricsReport::from_json(&text).with_context(|| format!("bad metrics in {}", path.display()))?;
            rows.push(ReportRow { model, metrics });
        }
    }
    Ok(rows)
}

fn find_metrics(dir: &Path, out: &mut Vec<PathBuf>) -> anyhow::Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_dir() {
            find_metrics(&p, out)?;
        } else if p.file_name().is_some_and(|n| n == METRICS) {
            out.push(p);
        }
    }
    Ok(())
}

/// Models x metrics table as CSV.
pub fn write_report_csv<W: std::io::Write>(rows: &[ReportRow], writer: W) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["model"];
    header.extend(MetricsReport::NAMES);
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.model.clone()];
        rec.extend(r.metrics.entries().into_iter().map(|(_, v)| crate::evalx::format_metric(v)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Models x metrics table as Markdown.
pub fn report_markdown(rows: &[ReportRow]) -> String {
    let mut s = String::from("| model |");
    for n in MetricsReport::NAMES {
        s.push_str(&format!(" {n} |"));
    }
    s.push_str("\n|---|");
    s.push_str(&"---:|".repeat(MetricsReport::NAMES.len()));
    s.push('\n');
    for r in rows {
        s.push_str(&format!("| {} |", r.model));
        for (_, v) in r.metrics.entries() {
            s.push_str(&format!(" {} |", crate::evalx::format_metric(v)));
        }
        s.push('\n');
    }
    s
}

pub fn report(cfg: &RunConfig, runs: &[PathBuf], out: &Path) -> anyhow::Result<PathBuf> {
    if runs.is_empty() {
        bail!("report needs at least one run directory");
    }
    let mut cfg = cfg.clone();
    if cfg.seed.is_none() {
        cfg.seed = Some(0);
    }
    let mut dir = start_run(&cfg, "report", out)?;
    let rows = collect_reports(runs)?;
    let p = dir.file("report.csv")?;
    write_report_csv(&rows, std::fs::File::create(&p)?)?;
    let md = report_markdown(&rows);
    dir.write("report.md", &md)?;
    print!("{md}");
    dir.finish(json!({ "rows": rows.len(), "runs": runs }))
}
