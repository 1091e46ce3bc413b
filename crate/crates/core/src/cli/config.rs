use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agents::{AgentSpec, Algorithm};
use crate::ensemble::{EnsembleConfig, EnsembleScheme};
use crate::env::{ActionMode, EnvConfig};
use crate::error::{Error, Result};
use crate::evalx::{MetricsConfig, ProtocolMode};
use crate::marketdata::CsvSchema;
use crate::signals::FillPolicy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Daily OHLCV bars, whole-share trading, 64/32 networks.
    #[default]
    StockDaily,
    /// Second-level bars with precomputed order-book features, fractional
    /// shares, discrete sell / hold / buy actions, 128x3 networks.
    CryptoSecond,
}

impl Profile {
    pub fn agent(self, algorithm: Algorithm) -> AgentSpec {
        match self {
            Profile::StockDaily => AgentSpec::stock(algorithm),
            Profile::CryptoSecond => AgentSpec::crypto(algorithm),
        }
    }

    pub fn algorithm(self) -> Algorithm {
        match self {
            Profile::StockDaily => Algorithm::Ppo,
            Profile::CryptoSecond => Algorithm::Dqn,
        }
    }

    pub fn env(self) -> EnvConfig {
        match self {
            Profile::StockDaily => EnvConfig::default(),
            Profile::CryptoSecond => EnvConfig {
                integer_shares: false,
                max_shares: 1.0,
                action_mode: ActionMode::Discrete {
                    levels: vec![-1.0, 0.0, 1.0],
                },
                ..EnvConfig::default()
            },
        }
    }

    /// Action mode matching `algorithm`: the profile's own mode when the
    /// kinds agree, otherwise continuous or `{-1, 0, 1}` levels.
    pub fn action_mode_for(self, algorithm: Algorithm) -> ActionMode {
        let own = self.env().action_mode;
        match (algorithm.is_discrete(), own) {
            (true, m @ ActionMode::Discrete { .. }) | (false, m @ ActionMode::Continuous) => m,
            (true, ActionMode::Continuous) => ActionMode::Discrete {
                levels: vec![-1.0, 0.0, 1.0],
            },
            (false, ActionMode::Discrete { .. }) => ActionMode::Continuous,
        }
    }

    fn ensemble(self) -> EnsembleConfig {
        let (members, scheme) = match self {
            Profile::StockDaily => (
                [Algorithm::Ppo, Algorithm::Sac, Algorithm::Ddpg],
                EnsembleScheme::WeightedAverage,
            ),
            Profile::CryptoSecond => (
                [Algorithm::Dqn, Algorithm::DoubleDqn, Algorithm::DuelingDqn],
                EnsembleScheme::MajorityVote,
            ),
        };
        EnsembleConfig {
            members: members.into_iter().map(|a| self.agent(a)).collect(),
            scheme,
            ..EnsembleConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Long-format OHLCV CSV (`timestamp,asset,open,high,low,close,volume`).
    pub ohlcv: Option<PathBuf>,
    pub schema: CsvSchema,
    /// Market-wide volatility index CSV, required by the `vix` indicator.
    pub vix: Option<PathBuf>,
    /// Sentiment / risk score CSV aligned onto the panel.
    pub signals: Option<PathBuf>,
    pub signal_fill: FillPolicy,
    /// Indicator names; empty means the standard set (without `vix` when no
    /// index file is configured).
    pub indicators: Vec<String>,
    pub turbulence_window: usize,
    /// Drop features correlated at or above this level with an earlier one.
    pub select_threshold: Option<f64>,
    /// Precomputed feature panel CSV; replaces OHLCV ingestion.
    pub features: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            ohlcv: None,
            schema: CsvSchema::default(),
            vix: None,
            signals: None,
            signal_fill: FillPolicy::Neutral,
            indicators: Vec::new(),
            turbulence_window: crate::marketdata::indicators::DEFAULT_TURBULENCE_WINDOW,
            select_threshold: None,
            features: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub n_envs: Vec<usize>,
    pub horizon: usize,
    /// Worker threads; 0 uses every available core.
    pub workers: usize,
    /// Minimum timed duration per sub-env count.
    pub min_seconds: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            n_envs: vec![1, 4, 16, 64],
            horizon: 200,
            workers: 0,
            min_seconds: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    /// Also evaluate buy-and-hold and mean-variance on the backtest window.
    pub enabled: bool,
    pub mv_lookback: usize,
    pub mv_rebalance: usize,
    pub mv_cap: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            enabled: false,
            mv_lookback: 60,
            mv_rebalance: 20,
            mv_cap: 1.0,
        }
    }
}

/// Everything one CLI run needs. Loaded from TOML on top of the profile's
/// defaults; the resolved form is written next to every run's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: Option<u64>,
    pub run_id: Option<String>,
    /// Trained agent checkpoint evaluated by `backtest` instead of training.
    pub checkpoint: Option<PathBuf>,
    pub data: DataConfig,
    pub env: EnvConfig,
    pub agent: AgentSpec,
    pub ensemble: EnsembleConfig,
    pub protocol: ProtocolMode,
    pub metrics: MetricsConfig,
    pub baselines: BaselineConfig,
    pub bench: BenchConfig,
}

impl RunConfig {
    pub fn defaults(profile: Profile) -> Self {
        RunConfig {
            profile,
            seed: None,
            run_id: None,
            checkpoint: None,
            data: DataConfig::default(),
            env: profile.env(),
            agent: profile.agent(profile.algorithm()),
            ensemble: profile.ensemble(),
            protocol: ProtocolMode::Backtest { eval_fraction: 0.15 },
            metrics: MetricsConfig::default(),
            baselines: BaselineConfig::default(),
            bench: BenchConfig::default(),
        }
    }

    /// Parses TOML, filling every missing field from the profile defaults.
    /// Ensemble members are filled from the profile's agent of their own
    /// algorithm. An unset `env.action_mode` follows `agent.algorithm`.
    pub fn from_toml(text: &str) -> Result<Self> {
        let user: toml::Table = toml::from_str(text).map_err(|e| Error::Config(vec![e.to_string()]))?;
        let profile = match user.get("profile") {
            Some(v) => Profile::deserialize(v.clone()).map_err(|e| Error::Config(vec![format!("profile: {e}")]))?,
            None => Profile::default(),
        };
        let mut defaults = RunConfig::defaults(profile);
        if let Some(a) = user.get("agent").and_then(|a| a.get("algorithm")) {
            let alg = Algorithm::deserialize(a.clone()).map_err(|e| Error::Config(vec![format!("agent: {e}")]))?;
            defaults.agent = profile.agent(alg);
            defaults.env.action_mode = profile.action_mode_for(alg);
        }
        let mut base = toml::Table::try_from(defaults).map_err(|e| Error::Config(vec![e.to_string()]))?;
        let mut user = user;
        if let Some(toml::Value::Array(members)) = user
            .get_mut("ensemble")
            .and_then(|e| e.as_table_mut())
            .and_then(|e| e.get_mut("members"))
        {
            for m in members.iter_mut() {
                if let toml::Value::Table(t) = m {
                    let alg = match t.get("algorithm") {
                        Some(a) => Algorithm::deserialize(a.clone())
                            .map_err(|e| Error::Config(vec![format!("ensemble.members: {e}")]))?,
                        None => Algorithm::Ppo,
                    };
                    let mut spec = toml::Table::try_from(profile.agent(alg))
                        .map_err(|e| Error::Config(vec![e.to_string()]))?;
                    merge(&mut spec, std::mem::take(t));
                    *t = spec;
                }
            }
        }
        if let Some(toml::Value::Table(p)) = user.get("protocol") {
            let same_mode = base
                .get("protocol")
                .and_then(|b| b.get("mode"))
                .zip(p.get("mode"))
                .is_some_and(|(a, b)| a == b);
            if !same_mode {
                base.remove("protocol");
            }
        }
        merge(&mut base, user);
        toml::Value::Table(base)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(vec![e.to_string()]))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::invalid(e.to_string()))
    }

    pub fn seed(&self) -> Result<u64> {
        self.seed
            .ok_or_else(|| Error::Config(vec!["seed is required (config `seed` or --seed)".into()]))
    }

    /// Fraction of trailing rows withheld from training.
    pub fn eval_fraction(&self) -> f64 {
        match self.protocol {
            ProtocolMode::Backtest { eval_fraction } => eval_fraction,
            ProtocolMode::Rolling { .. } => 0.0,
        }
    }

    /// Every problem with the configuration for `command`, not just the first.
    pub fn problems(&self, command: &str) -> Vec<String> {
        let mut out = Vec::new();
        if self.seed.is_none() {
            out.push("seed is required (config `seed` or --seed)".to_string());
        }
        let needs_data = !matches!(command, "bench" | "report");
        let d = &self.data;
        if needs_data && d.ohlcv.is_none() && d.features.is_none() {
            out.push("data.ohlcv or data.features must be set".to_string());
        }
        for (name, path) in [
            ("data.ohlcv", &d.ohlcv),
            ("data.vix", &d.vix),
            ("data.signals", &d.signals),
            ("data.features", &d.features),
            ("checkpoint", &self.checkpoint),
        ] {
            if let Some(p) = path {
                if !p.exists() {
                    out.push(format!("{name}: {} does not exist", p.display()));
                }
            }
        }
        if let Some(th) = d.select_threshold {
            if !(th > 0.0 && th <= 1.0) {
                out.push("data.select_threshold must be in (0, 1]".to_string());
            }
        }
        for name in &d.indicators {
            if let Err(e) = name.parse::<crate::marketdata::Indicator>() {
                out.push(format!("data.indicators: {e}"));
            } else if name == "vix" && d.vix.is_none() {
                out.push("data.indicators: `vix` needs data.vix".to_string());
            }
        }
        if d.turbulence_window < 2 {
            out.push("data.turbulence_window must be >= 2".to_string());
        }
        out.extend(self.env.problems());
        out.extend(self.agent.problems("agent."));
        if self.agent.algorithm.is_discrete() != matches!(self.env.action_mode, ActionMode::Discrete { .. })
            && matches!(command, "train" | "backtest" | "rolling")
        {
            out.push(format!(
                "agent.algorithm {} does not match env.action_mode",
                self.agent.algorithm
            ));
        }
        if command == "ensemble" {
            out.extend(self.ensemble.problems(&self.env));
        }
        out.extend(self.protocol.problems());
        match (command, &self.protocol) {
            ("backtest", ProtocolMode::Rolling { .. }) => {
                out.push("backtest needs protocol.mode = \"backtest\"".to_string())
            }
            ("rolling", ProtocolMode::Backtest { .. }) => {
                out.push("rolling needs protocol.mode = \"rolling\"".to_string())
            }
            _ => {}
        }
        out.extend(self.metrics.problems());
        if command == "bench" {
            let b = &self.bench;
            if b.n_envs.is_empty() || b.n_envs.contains(&0) {
                out.push("bench.n_envs must be a non-empty list of positive counts".to_string());
            }
            if b.horizon == 0 {
                out.push("bench.horizon must be >= 1".to_string());
            }
            if !(b.min_seconds >= 0.0 && b.min_seconds.is_finite()) {
                out.push("bench.min_seconds must be >= 0".to_string());
            }
        }
        if self.baselines.enabled {
            let b = &self.baselines;
            if b.mv_lookback < 3 || b.mv_rebalance == 0 {
                out.push("baselines.mv_lookback must be >= 3 and mv_rebalance >= 1".to_string());
            }
            if !(b.mv_cap > 0.0 && b.mv_cap <= 1.0) {
                out.push("baselines.mv_cap must be in (0, 1]".to_string());
            }
        }
        if let Some(id) = &self.run_id {
            if id.is_empty() || id.contains(['/', '\\']) || id == "." || id == ".." {
                out.push("run_id must be a plain directory name".to_string());
            }
        }
        out
    }

    pub fn validate(&self, command: &str) -> Result<()> {
        let p = self.problems(command);
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }
}

/// Recursively overlays `top` onto `base`; tables merge, everything else
/// replaces.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
