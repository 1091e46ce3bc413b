//! Gym-style trading environment with transaction costs and turbulence gating.
//!
//! State at time `t` is `[b_t, p_t, h_t, f_t]`: cash balance, the `K` asset
//! prices, the `K` share holdings and `K * I` features. Each step executes the
//! feasible part of the order at `p_t` (sells first, then buys in ascending
//! asset order, each capped by the cash left after costs), advances to
//! `p_{t+1}` and pays the change in total asset value as reward.

mod data;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use data::{MarketData, RISK_FEATURE, SENTIMENT_FEATURE, TURBULENCE_FEATURE};

use crate::error::{Error, Result};
use crate::signals;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ActionMode {
    /// Any real share count, clipped to `±max_shares`.
    Continuous,
    /// Every component must be one of `levels` (share counts).
    Discrete { levels: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub initial_balance: f64,
    /// Fraction of traded notional charged on every executed buy and sell.
    pub cost_rate: f64,
    /// Liquidate everything on steps where turbulence exceeds this value.
    pub turbulence_threshold: Option<f64>,
    pub gamma: f64,
    pub action_mode: ActionMode,
    pub max_shares: f64,
    /// Truncate executed trades to whole shares.
    pub integer_shares: bool,
    pub reward_scale: f64,
    /// Scale each action component by the sentiment factor of its asset.
    pub sentiment_adjust: bool,
    /// Divide rewards by the portfolio's aggregated risk factor.
    pub risk_penalty: bool,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            initial_balance: 1_000_000.0,
            cost_rate: 0.001,
            turbulence_threshold: None,
            gamma: 0.99,
            action_mode: ActionMode::Continuous,
            max_shares: 100.0,
            integer_shares: true,
            reward_scale: 1.0,
            sentiment_adjust: false,
            risk_penalty: false,
        }
    }
}

impl EnvConfig {
    /// Every violated constraint, not just the first.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.initial_balance.is_finite() && self.initial_balance >= 0.0) {
            out.push("env.initial_balance must be finite and >= 0".to_string());
        }
        if !(0.0..=0.05).contains(&self.cost_rate) {
            out.push("env.cost_rate must be in [0, 0.05]".to_string());
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            out.push("env.gamma must be in (0, 1)".to_string());
        }
        if !(self.max_shares.is_finite() && self.max_shares > 0.0) {
            out.push("env.max_shares must be > 0".to_string());
        }
        if !(self.reward_scale.is_finite() && self.reward_scale > 0.0) {
            out.push("env.reward_scale must be > 0".to_string());
        }
        if let ActionMode::Discrete { levels } = &self.action_mode {
            if levels.is_empty() || levels.iter().any(|l| !l.is_finite()) {
                out.push("env.action_mode.levels must be non-empty and finite".to_string());
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarketState {
    pub balance: f64,
    pub prices: Vec<f64>,
    pub holdings: Vec<f64>,
    pub features: Vec<f64>,
    pub t: usize,
}

impl MarketState {
    pub fn dim(&self) -> usize {
        1 + self.prices.len() + self.holdings.len() + self.features.len()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.write_flat(&mut out);
        out
    }

    pub fn write_flat(&self, out: &mut [f64]) {
        let k = self.prices.len();
        out[0] = self.balance;
        out[1..1 + k].copy_from_slice(&self.prices);
        out[1 + k..1 + 2 * k].copy_from_slice(&self.holdings);
        out[1 + 2 * k..].copy_from_slice(&self.features);
    }
}

/// `v_t = b_t + p_t . h_t`.
pub fn total_asset_value(s: &MarketState) -> f64 {
    s.balance + s.prices.iter().zip(&s.holdings).map(|(p, h)| p * h).sum::<f64>()
}

/// Reward and episode flags returned by [`Environment::step_into`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub reward: f64,
    /// No further transitions exist (data exhausted).
    pub terminal: bool,
    /// The episode was cut short; the next state still has value.
    pub truncated: bool,
}

impl Transition {
    pub fn done(&self) -> bool {
        self.terminal || self.truncated
    }
}

/// Minimal interface shared by the trading environment and the toy tasks the
/// learners are tested on. Observations are flat `f64` vectors.
pub trait Environment: Send {
    fn obs_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    /// Upper bound on the number of steps in one episode.
    fn max_steps(&self) -> usize;
    fn reset_into(&mut self, obs: &mut [f64]);
    fn step_into(&mut self, action: &[f64], obs: &mut [f64]) -> Result<Transition>;

    fn reset_obs(&mut self) -> Vec<f64> {
        let mut obs = vec![0.0; self.obs_dim()];
        self.reset_into(&mut obs);
        obs
    }
}

/// What actually traded on the last step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TradeRecord {
    pub t: usize,
    pub requested: Vec<f64>,
    pub executed: Vec<f64>,
    pub prices: Vec<f64>,
    pub costs: Vec<f64>,
    pub liquidated: bool,
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub state: MarketState,
    pub reward: f64,
    pub done: bool,
}

#[derive(Debug, Clone)]
pub struct TradingEnv {
    data: Arc<MarketData>,
    cfg: EnvConfig,
    state: MarketState,
    value: f64,
    done: bool,
    last_trade: TradeRecord,
}

impl TradingEnv {
    pub fn new(data: Arc<MarketData>, cfg: EnvConfig) -> Result<Self> {
        cfg.validate()?;
        if data.n_times() < 2 {
            return Err(Error::InsufficientData(
                "environment needs at least 2 timestamps".into(),
            ));
        }
        let k = data.n_assets();
        let mut env = TradingEnv {
            state: MarketState {
                balance: 0.0,
                prices: vec![0.0; k],
                holdings: vec![0.0; k],
                features: vec![0.0; k * data.n_features()],
                t: 0,
            },
            data,
            cfg,
            value: 0.0,
            done: false,
            last_trade: TradeRecord::default(),
        };
        env.reset();
        Ok(env)
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn data(&self) -> &Arc<MarketData> {
        &self.data
    }

    pub fn state(&self) -> &MarketState {
        &self.state
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn last_trade(&self) -> &TradeRecord {
        &self.last_trade
    }

    /// Current total asset value at current prices.
    pub fn value(&self) -> f64 {
        self.value
    }

    /// Deterministic start: all cash, no holdings, first bar of data.
    pub fn reset(&mut self) -> MarketState {
        self.state.t = 0;
        self.state.balance = self.cfg.initial_balance;
        self.state.holdings.iter_mut().for_each(|h| *h = 0.0);
        self.load_market(0);
        self.value = total_asset_value(&self.state);
        self.done = false;
        self.last_trade = TradeRecord::default();
        self.state.clone()
    }

    /// Starts from an arbitrary cash/holdings position at the first bar.
    pub fn reset_with(&mut self, balance: f64, holdings: &[f64]) -> Result<MarketState> {
        if holdings.len() != self.data.n_assets() {
            return Err(Error::Dimension {
                what: "holdings",
                expected: self.data.n_assets(),
                got: holdings.len(),
            });
        }
        if balance < 0.0 || holdings.iter().any(|h| *h < 0.0) {
            return Err(Error::invalid("balance and holdings must be non-negative"));
        }
        self.reset();
        self.state.balance = balance;
        self.state.holdings.copy_from_slice(holdings);
        self.value = total_asset_value(&self.state);
        Ok(self.state.clone())
    }

    fn load_market(&mut self, t: usize) {
        self.state.prices.copy_from_slice(self.data.prices_at(t));
        self.state.features.copy_from_slice(self.data.features_at(t));
    }

    pub fn step(&mut self, action: &[f64]) -> Result<StepOutcome> {
        let (reward, done) = self.advance(action)?;
        Ok(StepOutcome {
            state: self.state.clone(),
            reward,
            done,
        })
    }

    fn check_action(&self, action: &[f64]) -> Result<()> {
        if self.done {
            return Err(Error::EpisodeDone);
        }
        let k = self.data.n_assets();
        if action.len() != k {
            return Err(Error::Dimension {
                what: "action",
                expected: k,
                got: action.len(),
            });
        }
        if action.iter().any(|a| !a.is_finite()) {
            return Err(Error::NonFiniteAction);
        }
        if let ActionMode::Discrete { levels } = &self.cfg.action_mode {
            if let Some(a) = action.iter().find(|a| !levels.contains(a)) {
                return Err(Error::invalid(format!("action {a} is not a configured level")));
            }
        }
        Ok(())
    }

    fn advance(&mut self, action: &[f64]) -> Result<(f64, bool)> {
        self.check_action(action)?;
        let t = self.state.t;
        let k = self.data.n_assets();
        let c = self.cfg.cost_rate;

        let mut orders: Vec<f64> = action
            .iter()
            .map(|a| a.clamp(-self.cfg.max_shares, self.cfg.max_shares))
            .collect();
        if self.cfg.sentiment_adjust {
            if let Some(u) = self.data.sentiment_at(t) {
                for (o, &score) in orders.iter_mut().zip(u) {
                    *o = signals::sentiment_factor(score, *o)?;
                }
            }
        }
        let liquidate = matches!(
            (self.cfg.turbulence_threshold, self.data.turbulence_at(t)),
            (Some(limit), Some(turb)) if turb > limit
        );
        if liquidate {
            for (o, h) in orders.iter_mut().zip(&self.state.holdings) {
                *o = -h;
            }
        }
        if self.cfg.integer_shares {
            orders.iter_mut().for_each(|o| *o = o.trunc());
        }

        let mut executed = vec![0.0; k];
        let mut costs = vec![0.0; k];
        let prices = self.data.prices_at(t);
        for i in 0..k {
            if orders[i] < 0.0 {
                let qty = (-orders[i]).min(self.state.holdings[i]);
                if qty > 0.0 {
                    let notional = prices[i] * qty;
                    let fee = notional * c;
                    self.state.balance += notional - fee;
                    self.state.holdings[i] -= qty;
                    executed[i] = -qty;
                    costs[i] = fee;
                }
            }
        }
        for i in 0..k {
            if orders[i] > 0.0 {
                let mut affordable = self.state.balance / (prices[i] * (1.0 + c));
                if self.cfg.integer_shares {
                    affordable = affordable.floor();
                }
                let qty = orders[i].min(affordable);
                if qty > 0.0 {
                    let notional = prices[i] * qty;
                    let fee = notional * c;
                    self.state.balance = (self.state.balance - notional - fee).max(0.0);
                    self.state.holdings[i] += qty;
                    executed[i] = qty;
                    costs[i] = fee;
                }
            }
        }
        self.last_trade = TradeRecord {
            t,
            requested: action.to_vec(),
            executed,
            prices: prices.to_vec(),
            costs,
            liquidated: liquidate,
        };

        self.state.t = t + 1;
        self.load_market(t + 1);
        let new_value = total_asset_value(&self.state);
        let mut reward = (new_value - self.value) * self.cfg.reward_scale;
        if self.cfg.risk_penalty {
            if let Some(q) = self.data.risk_at(t) {
                let m = signals::portfolio_risk_factor(
                    q,
                    self.state.balance,
                    &self.state.prices,
                    &self.state.holdings,
                )?;
                reward = signals::apply_risk_penalty(reward, m);
            }
        }
        self.value = new_value;
        self.done = self.state.t + 1 >= self.data.n_times();
        Ok((reward, self.done))
    }
}

impl Environment for TradingEnv {
    fn obs_dim(&self) -> usize {
        self.data.state_dim()
    }

    fn action_dim(&self) -> usize {
        self.data.n_assets()
    }

    fn max_steps(&self) -> usize {
        self.data.n_times() - 1
    }

    fn reset_into(&mut self, obs: &mut [f64]) {
        self.reset();
        self.state.write_flat(obs);
    }

    fn step_into(&mut self, action: &[f64], obs: &mut [f64]) -> Result<Transition> {
        let (reward, done) = self.advance(action)?;
        self.state.write_flat(obs);
        Ok(Transition {
            reward,
            terminal: done,
            truncated: false,
        })
    }
}
