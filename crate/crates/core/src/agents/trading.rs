use std::sync::Arc;

use super::policy::DistributionSource;
use super::trained::{train, TrainedAgent};
use super::{ActionSpace, AgentSpec};
use crate::env::{EnvConfig, MarketData, TradingEnv};
use crate::error::{Error, Result};
use crate::evalx::TradingAgent;
use crate::vecenv::VecEnv;

/// `n_envs` identical trading environments over `data`.
pub fn trading_venv(data: Arc<MarketData>, cfg: &EnvConfig, n_envs: usize) -> Result<VecEnv<TradingEnv>> {
    let envs = (0..n_envs)
        .map(|_| TradingEnv::new(data.clone(), cfg.clone()))
        .collect::<Result<Vec<_>>>()?;
    VecEnv::new(envs, 1)
}

/// Trains `spec` on a trading environment over `data`.
pub fn train_on_market(
    spec: &AgentSpec,
    data: Arc<MarketData>,
    cfg: &EnvConfig,
    peers: &[&dyn DistributionSource],
    kl_lambda: f64,
) -> Result<TrainedAgent> {
    if data.n_times() < 2 {
        return Err(Error::InsufficientData("training needs at least two bars".into()));
    }
    let space = ActionSpace::for_trading(cfg, data.n_assets());
    let venv = trading_venv(data, cfg, spec.n_envs)?;
    train(spec, venv, &space, peers, kl_lambda)
}

/// Protocol adapter that trains a fresh agent on every `fit` without
/// validation data and acts greedily. Hyperparameters are fixed by the
/// spec, so calls that offer validation data leave the agent unchanged.
#[derive(Debug, Clone)]
pub struct RlAgent {
    spec: AgentSpec,
    env_cfg: EnvConfig,
    agent: Option<TrainedAgent>,
    updates: u64,
}

impl RlAgent {
    pub fn new(spec: AgentSpec, env_cfg: EnvConfig) -> Self {
        RlAgent {
            spec,
            env_cfg,
            agent: None,
            updates: 0,
        }
    }

    /// Wraps an already trained agent.
    pub fn from_trained(agent: TrainedAgent, env_cfg: EnvConfig) -> Self {
        RlAgent {
            spec: agent.spec.clone(),
            updates: agent.updates,
            agent: Some(agent),
            env_cfg,
        }
    }

    pub fn trained(&self) -> Option<&TrainedAgent> {
        self.agent.as_ref()
    }

    pub fn into_trained(self) -> Option<TrainedAgent> {
        self.agent
    }
}

impl TradingAgent for RlAgent {
    fn fit(&mut self, train: &Arc<MarketData>, validation: Option<&Arc<MarketData>>) -> Result<()> {
        if validation.is_some() {
            return Ok(());
        }
        let agent = train_on_market(&self.spec, train.clone(), &self.env_cfg, &[], 0.0)?;
        self.updates += agent.updates;
        self.agent = Some(agent);
        Ok(())
    }

    fn act(&self, obs: &[f64]) -> Result<Vec<f64>> {
        self.agent
            .as_ref()
            .ok_or_else(|| Error::invalid("agent used before training"))?
            .act_greedy(obs)
    }

    fn updates(&self) -> u64 {
        self.updates
    }
}

/// A loaded checkpoint: `fit` does nothing.
#[derive(Debug, Clone)]
pub struct FrozenAgent(pub TrainedAgent);

impl TradingAgent for FrozenAgent {
    fn fit(&mut self, _train: &Arc<MarketData>, _validation: Option<&Arc<MarketData>>) -> Result<()> {
        Ok(())
    }

    fn act(&self, obs: &[f64]) -> Result<Vec<f64>> {
        self.0.act_greedy(obs)
    }

    fn updates(&self) -> u64 {
        self.0.updates
    }
}
